import { describe, expect, it } from "vitest";

import {
  errorResponse,
  parseRequest,
  ProtocolError,
  serializeResponse,
} from "../src/protocol.js";

describe("parseRequest", () => {
  it("accepts a minimal exec request", () => {
    const req = parseRequest('{"id": "a1", "op": "exec", "source": "1"}');
    expect(req.id).toBe("a1");
    expect(req.source).toBe("1");
    expect(req.timeout_ms).toBeUndefined();
  });

  it("accepts numeric ids and optional fields", () => {
    const req = parseRequest(
      '{"id": 7, "op": "exec", "source": "1", "timeout_ms": 50, "dataset": "d.csv"}',
    );
    expect(req.id).toBe(7);
    expect(req.timeout_ms).toBe(50);
    expect(req.dataset).toBe("d.csv");
  });

  it.each([
    ["not json", "broken {"],
    ["non-object", "[1, 2]"],
    ["missing id", '{"op": "exec", "source": "1"}'],
    ["wrong op", '{"id": 1, "op": "eval", "source": "1"}'],
    ["empty source", '{"id": 1, "op": "exec", "source": ""}'],
    ["bad timeout", '{"id": 1, "op": "exec", "source": "1", "timeout_ms": -5}'],
    ["bad dataset", '{"id": 1, "op": "exec", "source": "1", "dataset": 9}'],
  ])("rejects %s", (_label, line) => {
    expect(() => parseRequest(line)).toThrow(ProtocolError);
  });
});

describe("serialization", () => {
  it("emits exactly one line per response", () => {
    const line = serializeResponse({ id: 1, ok: true, stdout: "x\n" });
    expect(line.endsWith("\n")).toBe(true);
    expect(line.slice(0, -1)).not.toContain("\n");
  });

  it("error responses carry code and message", () => {
    const resp = errorResponse("r1", "Timeout", "too slow", "partial");
    expect(resp.ok).toBe(false);
    expect(resp.error).toEqual({ code: "Timeout", message: "too slow" });
    expect(resp.stdout).toBe("partial");
  });
});
