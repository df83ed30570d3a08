// Script execution in a restricted vm context.
//
// Each run gets a fresh context: no state survives between requests. The
// context exposes only JS built-ins plus `dataset` (frozen rows), `print`,
// a capturing `console`, and `writeArtifact` (confined to the scratch
// directory). Node globals — require, process, fetch, fs — never enter the
// context, so network access and stray filesystem writes fail as plain
// ReferenceErrors inside the script.

import { mkdirSync, writeFileSync } from "node:fs";
import { basename, join, resolve } from "node:path";
import * as vm from "node:vm";

import type { Row } from "./dataset.js";

export interface RunOutcome {
  ok: boolean;
  stdout: string;
  value?: unknown;
  artifacts: string[];
  errorCode?: "Timeout" | "ScriptError";
  errorMessage?: string;
}

function formatValue(value: unknown): string {
  if (typeof value === "string") return value;
  try {
    const encoded = JSON.stringify(value);
    if (encoded !== undefined) return encoded;
  } catch {
    // fall through for cycles and exotic objects
  }
  return String(value);
}

function jsonSafe(value: unknown): unknown {
  if (value === undefined) return null;
  try {
    JSON.stringify(value);
    return value;
  } catch {
    return String(value);
  }
}

export function runScript(
  source: string,
  dataset: readonly Row[],
  scratchDir: string,
  timeoutMs: number,
): RunOutcome {
  const lines: string[] = [];
  const artifacts: string[] = [];
  const scratchRoot = resolve(scratchDir);

  const print = (...args: unknown[]) => {
    lines.push(args.map(formatValue).join(" ") + "\n");
  };

  const writeArtifact = (name: unknown, content: unknown): string => {
    const clean = basename(String(name));
    if (!clean || clean === "." || clean === ".." || clean !== String(name)) {
      throw new Error(`artifact name must be a bare file name, got ${String(name)}`);
    }
    mkdirSync(scratchRoot, { recursive: true });
    const target = join(scratchRoot, clean);
    writeFileSync(target, formatValue(content), "utf-8");
    artifacts.push(target);
    return target;
  };

  const sandbox: Record<string, unknown> = {
    dataset,
    print,
    console: { log: print, error: print, warn: print },
    writeArtifact,
  };
  const context = vm.createContext(sandbox, { codeGeneration: { strings: false } });

  try {
    const value = vm.runInContext(source, context, {
      timeout: Math.max(1, Math.floor(timeoutMs)),
      displayErrors: true,
    });
    return {
      ok: true,
      stdout: lines.join(""),
      value: jsonSafe(value),
      artifacts,
    };
  } catch (err) {
    const error = err as NodeJS.ErrnoException;
    const timedOut =
      error?.code === "ERR_SCRIPT_EXECUTION_TIMEOUT" ||
      /timed out/i.test(String(error?.message));
    const message = error instanceof Error
      ? `${error.name}: ${error.message}`
      : String(error);
    return {
      ok: false,
      stdout: lines.join(""),
      artifacts,
      errorCode: timedOut ? "Timeout" : "ScriptError",
      errorMessage: message,
    };
  }
}
