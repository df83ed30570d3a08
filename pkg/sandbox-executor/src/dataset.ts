// Read-only dataset loading: CSV with a header row, RFC-4180-style quoting.

import { readFileSync } from "node:fs";

export type Row = Record<string, string | number>;

function parseCsv(text: string): string[][] {
  const rows: string[][] = [];
  let row: string[] = [];
  let cell = "";
  let inQuotes = false;
  for (let i = 0; i < text.length; i++) {
    const ch = text[i];
    if (inQuotes) {
      if (ch === '"') {
        if (text[i + 1] === '"') {
          cell += '"';
          i++;
        } else {
          inQuotes = false;
        }
      } else {
        cell += ch;
      }
    } else if (ch === '"') {
      inQuotes = true;
    } else if (ch === ",") {
      row.push(cell);
      cell = "";
    } else if (ch === "\n" || ch === "\r") {
      if (ch === "\r" && text[i + 1] === "\n") i++;
      row.push(cell);
      cell = "";
      rows.push(row);
      row = [];
    } else {
      cell += ch;
    }
  }
  if (cell.length > 0 || row.length > 0) {
    row.push(cell);
    rows.push(row);
  }
  return rows;
}

function coerce(cell: string): string | number {
  if (cell === "") return "";
  const n = Number(cell);
  // leading zeros (zip codes, ids) stay strings
  if (Number.isFinite(n) && String(n) === cell.trim()) return n;
  return cell;
}

const cache = new Map<string, readonly Row[]>();

export function loadDataset(path: string): readonly Row[] {
  const cached = cache.get(path);
  if (cached) return cached;
  const table = parseCsv(readFileSync(path, "utf-8"));
  if (table.length === 0) {
    throw new Error(`${path}: empty dataset file`);
  }
  const header = table[0];
  const rows: Row[] = [];
  for (const cells of table.slice(1)) {
    if (cells.length === 1 && cells[0] === "") continue; // trailing blank line
    const row: Row = {};
    header.forEach((name, i) => {
      row[name] = coerce(cells[i] ?? "");
    });
    rows.push(Object.freeze(row));
  }
  const frozen = Object.freeze(rows);
  cache.set(path, frozen);
  return frozen;
}
