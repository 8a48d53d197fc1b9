/** Operational edits: diffing two buffer states and debounced coalescing.
 *
 * Typing is never blocked on the server: the buffer changes instantly, and a
 * trailing debounce (200 ms) folds bursts into a single update computed from
 * the last text the server acknowledged to the newest local text.
 */

import type { EditOp } from "./protocol.js";

export const DEBOUNCE_MS = 200;

/** Minimal retain/delete/insert sequence turning `before` into `after`. */
export function computeEdits(before: string, after: string): EditOp[] {
  if (before === after) return [];
  let prefix = 0;
  const max = Math.min(before.length, after.length);
  while (prefix < max && before[prefix] === after[prefix]) prefix++;
  let suffix = 0;
  while (
    suffix < max - prefix &&
    before[before.length - 1 - suffix] === after[after.length - 1 - suffix]
  ) {
    suffix++;
  }
  const ops: EditOp[] = [];
  if (prefix > 0) ops.push({ op: "retain", count: prefix });
  const deleted = before.length - prefix - suffix;
  if (deleted > 0) ops.push({ op: "delete", count: deleted });
  const inserted = after.slice(prefix, after.length - suffix);
  if (inserted.length > 0) ops.push({ op: "insert", text: inserted });
  return ops;
}

/** Reference application of an edit sequence (used by tests and resync). */
export function applyEdits(text: string, ops: EditOp[]): string {
  let cursor = 0;
  let out = "";
  for (const op of ops) {
    if (op.op === "retain") {
      out += text.slice(cursor, cursor + op.count);
      cursor += op.count;
    } else if (op.op === "delete") {
      cursor += op.count;
    } else {
      out += op.text;
    }
  }
  return out + text.slice(cursor);
}

export class Debouncer {
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private readonly delayMs: number,
    private readonly fire: () => void,
  ) {}

  poke(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      this.fire();
    }, this.delayMs);
  }

  flushNow(): void {
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
      this.fire();
    }
  }

  get pending(): boolean {
    return this.timer !== null;
  }
}

/** Coalesces local buffer changes into one operational update per burst. */
export class EditCoalescer {
  private baseText = ""; // last text shipped to the server
  private latestText = "";
  private readonly debouncer: Debouncer;

  constructor(
    private readonly ship: (ops: EditOp[]) => void,
    delayMs: number = DEBOUNCE_MS,
  ) {
    this.debouncer = new Debouncer(delayMs, () => this.flush());
  }

  /** The buffer changed locally (echo already happened). */
  changed(newText: string): void {
    this.latestText = newText;
    this.debouncer.poke();
  }

  /** Reset both sides (after a resync with a fresh document). */
  rebase(text: string): void {
    this.baseText = text;
    this.latestText = text;
  }

  flush(): void {
    const ops = computeEdits(this.baseText, this.latestText);
    if (ops.length === 0) return;
    this.baseText = this.latestText;
    this.ship(ops);
  }

  get dirty(): boolean {
    return this.baseText !== this.latestText;
  }
}
