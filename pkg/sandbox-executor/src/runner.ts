// Worker child: executes one script at a time inside a vm context.
//
// The server process owns the wire protocol and the lifecycle; this child
// only turns {id, source, timeout_ms, dataset, scratch} lines into outcome
// lines. Running scripts here, not in the server, is what makes heap
// exhaustion survivable: the child dies, the server answers MemoryLimit
// and spawns a fresh one.

import { createInterface } from "node:readline";

import { loadDataset } from "./dataset.js";
import { runScript } from "./sandbox.js";

interface WorkOrder {
  id: string | number;
  source: string;
  timeout_ms: number;
  dataset: string;
  scratch: string;
}

const rl = createInterface({ input: process.stdin, terminal: false });

// Readiness handshake: the server holds work until this line arrives, so
// interpreter boot time never counts against a script's wall-clock budget.
process.stdout.write('{"ready":true}\n');

rl.on("line", (line: string) => {
  if (!line.trim()) return;
  const order = JSON.parse(line) as WorkOrder;
  let outcome;
  try {
    const rows = loadDataset(order.dataset);
    outcome = runScript(order.source, rows, order.scratch, order.timeout_ms);
  } catch (err) {
    outcome = {
      ok: false,
      stdout: "",
      artifacts: [],
      errorCode: "ScriptError" as const,
      errorMessage: String((err as Error).message ?? err),
    };
  }
  process.stdout.write(JSON.stringify({ id: order.id, ...outcome }) + "\n");
});
