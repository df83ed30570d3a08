// Executor server: NDJSON over stdio, one request in flight at a time.
//
// Launch: node dist/main.js --dataset PATH --scratch DIR --timeout-default MS
//         [--memory-limit-mb N]
//
// Scripts run in a worker child (see runner.ts). The server enforces a
// wall-clock backstop on top of the worker's own interpreter timeout and
// keeps serving across script crashes, timeouts, and memory blowups.

import { spawn, type ChildProcess } from "node:child_process";
import { fileURLToPath } from "node:url";
import { dirname, join } from "node:path";
import { createInterface } from "node:readline";

import {
  errorResponse,
  parseRequest,
  ProtocolError,
  serializeResponse,
  type ExecRequest,
  type ExecResponse,
} from "./protocol.js";

interface Config {
  dataset: string;
  scratch: string;
  timeoutDefaultMs: number;
  memoryLimitMb: number;
}

function parseArgs(argv: string[]): Config {
  const config: Config = {
    dataset: "",
    scratch: "",
    timeoutDefaultMs: 5000,
    memoryLimitMb: 256,
  };
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    const value = argv[i + 1];
    if (value === undefined) throw new Error(`missing value for ${key}`);
    switch (key) {
      case "--dataset": config.dataset = value; break;
      case "--scratch": config.scratch = value; break;
      case "--timeout-default": config.timeoutDefaultMs = Number(value); break;
      case "--memory-limit-mb": config.memoryLimitMb = Number(value); break;
      default: throw new Error(`unknown argument ${key}`);
    }
  }
  if (!config.dataset) throw new Error("--dataset is required");
  if (!config.scratch) throw new Error("--scratch is required");
  if (!Number.isFinite(config.timeoutDefaultMs) || config.timeoutDefaultMs <= 0) {
    throw new Error("--timeout-default must be a positive number of milliseconds");
  }
  return config;
}

const OOM_PATTERN = /heap out of memory|allocation failed/i;

class Worker {
  child!: ChildProcess;
  stderrTail = "";
  ready!: Promise<void>;
  onLine: ((line: string) => void) | null = null;
  onExit: ((oom: boolean) => void) | null = null;

  constructor(private memoryLimitMb: number) {
    this.spawn();
  }

  spawn(): void {
    const here = dirname(fileURLToPath(import.meta.url));
    this.stderrTail = "";
    this.child = spawn(
      process.execPath,
      [`--max-old-space-size=${this.memoryLimitMb}`, join(here, "runner.js")],
      { stdio: ["pipe", "pipe", "pipe"] },
    );
    let markReady: () => void;
    this.ready = new Promise((resolve) => { markReady = resolve; });
    const lines = createInterface({ input: this.child.stdout!, terminal: false });
    lines.on("line", (line) => {
      if (line === '{"ready":true}') {
        markReady();
        return;
      }
      this.onLine?.(line);
    });
    this.child.stderr!.on("data", (chunk: Buffer) => {
      this.stderrTail = (this.stderrTail + chunk.toString()).slice(-4096);
    });
    this.child.on("exit", () => {
      markReady(); // unblock senders; the exit handler reports the failure
      this.onExit?.(OOM_PATTERN.test(this.stderrTail));
    });
  }

  restart(): void {
    this.child.removeAllListeners("exit");
    this.child.kill("SIGKILL");
    this.spawn();
  }

  send(payload: unknown): void {
    this.child.stdin!.write(JSON.stringify(payload) + "\n");
  }
}

async function execute(worker: Worker, config: Config,
                        request: ExecRequest): Promise<ExecResponse> {
  const timeoutMs = request.timeout_ms ?? config.timeoutDefaultMs;
  // The worker's interpreter timeout answers first in the normal case; this
  // backstop keeps the hard "within 2x the limit" promise if it cannot.
  const backstopMs = Math.floor(timeoutMs * 1.5) + 25;
  await worker.ready;
  return new Promise((resolvePromise) => {
    let settled = false;
    const finish = (response: ExecResponse, restartWorker: boolean) => {
      if (settled) return;
      settled = true;
      clearTimeout(backstop);
      worker.onLine = null;
      worker.onExit = null;
      if (restartWorker) worker.restart();
      resolvePromise(response);
    };

    const backstop = setTimeout(() => {
      finish(errorResponse(request.id, "Timeout",
                           `script exceeded ${timeoutMs} ms`), true);
    }, backstopMs);

    worker.onLine = (line) => {
      let outcome: any;
      try {
        outcome = JSON.parse(line);
      } catch {
        finish(errorResponse(request.id, "ScriptError",
                             "worker produced unparseable output"), true);
        return;
      }
      if (outcome.ok) {
        finish({
          id: request.id,
          ok: true,
          stdout: outcome.stdout ?? "",
          value: outcome.value ?? null,
          artifacts: outcome.artifacts ?? [],
        }, false);
      } else {
        finish(errorResponse(request.id, outcome.errorCode ?? "ScriptError",
                             outcome.errorMessage ?? "script failed",
                             outcome.stdout ?? ""), false);
      }
    };

    worker.onExit = (oom) => {
      finish(errorResponse(
        request.id,
        oom ? "MemoryLimit" : "ScriptError",
        oom ? `worker exceeded the ${config.memoryLimitMb} MB heap limit`
            : "worker exited unexpectedly",
      ), true);
    };

    worker.send({
      id: request.id,
      source: request.source,
      timeout_ms: timeoutMs,
      dataset: request.dataset ?? config.dataset,
      scratch: config.scratch,
    });
  });
}

function salvageId(line: string): string | number | null {
  try {
    const raw = JSON.parse(line);
    const id = (raw as Record<string, unknown>)?.id;
    if (typeof id === "string" || typeof id === "number") return id;
  } catch {
    // unparseable line has no recoverable id
  }
  return null;
}

export function main(): void {
  const config = parseArgs(process.argv.slice(2));
  const worker = new Worker(config.memoryLimitMb);
  const input = createInterface({ input: process.stdin, terminal: false });

  let pending: Promise<void> = Promise.resolve();
  input.on("line", (line) => {
    if (!line.trim()) return;
    pending = pending.then(async () => {
      let response: ExecResponse;
      try {
        const request = parseRequest(line);
        response = await execute(worker, config, request);
      } catch (err) {
        if (err instanceof ProtocolError) {
          response = errorResponse(salvageId(line), "ProtocolError", err.message);
        } else {
          response = errorResponse(salvageId(line), "ScriptError", String(err));
        }
      }
      process.stdout.write(serializeResponse(response));
    });
  });
  input.on("close", () => {
    void pending.then(() => {
      worker.child.removeAllListeners("exit");
      worker.child.kill("SIGKILL");
      process.exit(0);
    });
  });
}

main();
