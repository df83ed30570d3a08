// NDJSON request/response protocol: one JSON object per line, UTF-8.

export interface ExecRequest {
  id: string | number;
  op: "exec";
  source: string;
  timeout_ms?: number;
  dataset?: string;
}

export interface ExecError {
  code: "Timeout" | "MemoryLimit" | "ScriptError" | "ProtocolError";
  message: string;
}

export interface ExecResponse {
  id: string | number | null;
  ok: boolean;
  stdout: string;
  value?: unknown;
  artifacts?: string[];
  error?: ExecError;
}

export class ProtocolError extends Error {}

export function parseRequest(line: string): ExecRequest {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch (err) {
    throw new ProtocolError(`not valid JSON: ${(err as Error).message}`);
  }
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    throw new ProtocolError("request must be a JSON object");
  }
  const req = raw as Record<string, unknown>;
  const id = req.id;
  if (typeof id !== "string" && typeof id !== "number") {
    throw new ProtocolError("request needs a string or number id");
  }
  if (req.op !== "exec") {
    throw new ProtocolError(`unknown op ${JSON.stringify(req.op)}`);
  }
  if (typeof req.source !== "string" || req.source.length === 0) {
    throw new ProtocolError("request needs a non-empty source string");
  }
  if (req.timeout_ms !== undefined &&
      (typeof req.timeout_ms !== "number" || req.timeout_ms <= 0)) {
    throw new ProtocolError("timeout_ms must be a positive number");
  }
  if (req.dataset !== undefined && typeof req.dataset !== "string") {
    throw new ProtocolError("dataset must be a path string");
  }
  return {
    id,
    op: "exec",
    source: req.source,
    timeout_ms: req.timeout_ms as number | undefined,
    dataset: req.dataset as string | undefined,
  };
}

export function serializeResponse(response: ExecResponse): string {
  return JSON.stringify(response) + "\n";
}

export function errorResponse(
  id: string | number | null,
  code: ExecError["code"],
  message: string,
  stdout = "",
): ExecResponse {
  return { id, ok: false, stdout, error: { code, message } };
}
