/** Headless editor logic: local echo, edit shipping, goal panel, perspective.
 *
 * The DOM layer delegates everything here; nothing in this file computes
 * prover state — goal text, statuses and markup all come from the store,
 * which only ever holds server feedback.
 */

import { Connection } from "./connection.js";
import { Debouncer, EditCoalescer, DEBOUNCE_MS } from "./edits.js";
import type { EditOp } from "./protocol.js";
import { DocumentStore, type Decoration, type SpanState } from "./store.js";

export interface GoalPanel {
  spanId: number | null;
  pinned: boolean;
  text: string;
}

export class EditorController {
  buffer = "";
  caret = 0;
  pinnedSpan: number | null = null;
  readonly store = new DocumentStore();
  private readonly coalescer: EditCoalescer;
  private readonly perspectiveDebouncer: Debouncer;
  private viewport: [number, number] = [0, 0];
  private lastPerspective = "";
  private renderHooks: Array<() => void> = [];

  constructor(
    readonly connection: Connection,
    debounceMs: number = DEBOUNCE_MS,
  ) {
    this.coalescer = new EditCoalescer((ops) => this.shipEdits(ops), debounceMs);
    this.perspectiveDebouncer = new Debouncer(debounceMs, () =>
      this.sendPerspective(),
    );
    connection.onMessage((msg) => {
      if (this.store.apply(msg)) this.repaint();
    });
    connection.onOpen(() => {
      // fresh document id: replay the whole buffer
      this.coalescer.rebase("");
      this.coalescer.changed(this.buffer);
      this.coalescer.flush();
      this.lastPerspective = "";
      this.sendPerspective();
    });
  }

  onRender(hook: () => void): void {
    this.renderHooks.push(hook);
  }

  private repaint(): void {
    for (const hook of this.renderHooks) hook();
  }

  // -- editing (never blocked by checking) ----------------------------------

  /** Local echo first, network later: returns immediately. */
  setBuffer(text: string, caret: number): void {
    const changedFrom = firstDifference(this.buffer, text);
    this.buffer = text;
    this.caret = caret;
    if (changedFrom !== null) {
      this.store.invalidateFrom(changedFrom);
      this.coalescer.changed(text);
    }
    this.repaint();
  }

  typing(insert: string): void {
    const next =
      this.buffer.slice(0, this.caret) + insert + this.buffer.slice(this.caret);
    this.setBuffer(next, this.caret + insert.length);
  }

  flushEdits(): void {
    this.coalescer.flush();
  }

  private shipEdits(ops: EditOp[]): void {
    this.connection.send({
      type: "update",
      document_id: this.connection.documentId,
      edits: ops,
    });
  }

  // -- what the editor draws --------------------------------------------------

  decorations(): Decoration[] {
    return this.store.decorations();
  }

  // -- goal panel ---------------------------------------------------------------

  setCaret(position: number): void {
    this.caret = position;
    this.repaint();
  }

  pin(spanId: number | null): void {
    this.pinnedSpan = spanId;
    this.schedulePerspective(); // the pinned span always stays observed
    this.repaint();
  }

  goalPanel(): GoalPanel {
    if (this.pinnedSpan !== null) {
      const span = this.store.get(this.pinnedSpan);
      return {
        spanId: this.pinnedSpan,
        pinned: true,
        text: span?.goals ?? "",
      };
    }
    const span = this.store.spanAt(this.caret);
    if (span === undefined || span.goals === undefined) {
      return { spanId: span?.id ?? null, pinned: false, text: "" };
    }
    return { spanId: span.id, pinned: false, text: span.goals };
  }

  // -- perspective ----------------------------------------------------------------

  setViewport(startChar: number, endChar: number): void {
    this.viewport = [startChar, endChar];
    this.schedulePerspective();
  }

  schedulePerspective(): void {
    this.perspectiveDebouncer.poke();
  }

  visibleSpanIds(): number[] {
    const ids = this.store
      .spansIn(this.viewport[0], this.viewport[1])
      .map((s) => s.id);
    if (this.pinnedSpan !== null && !ids.includes(this.pinnedSpan)) {
      ids.push(this.pinnedSpan);
    }
    return ids;
  }

  private sendPerspective(): void {
    const ids = this.visibleSpanIds();
    const key = ids.join(",");
    if (key === this.lastPerspective) return; // unchanged viewport: silence
    this.lastPerspective = key;
    this.connection.send({
      type: "perspective",
      document_id: this.connection.documentId,
      span_ids: ids,
    });
  }

  // -- queries ---------------------------------------------------------------------

  query(text: string): void {
    const span = this.store.spanAt(this.caret);
    this.connection.send({
      type: "query",
      span_id: span?.id ?? -1,
      text,
    });
  }
}

function firstDifference(a: string, b: string): number | null {
  if (a === b) return null;
  const max = Math.min(a.length, b.length);
  let i = 0;
  while (i < max && a[i] === b[i]) i++;
  return i;
}
