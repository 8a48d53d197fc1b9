/** Revision-checked document mirror: span map, statuses, goals, markup.
 *
 * Everything rendered anywhere in the UI is looked up here, and everything
 * here came from a server message whose revision matched. Feedback for an
 * abandoned revision is dropped at the door.
 */

import type {
  FeedbackMsg,
  Hyperlink,
  ServerMessage,
  SpanInfo,
} from "./protocol.js";

export type SpanStatus = "unknown" | "processing" | "processed" | "failed";

export interface SpanState {
  id: number;
  offset: number;
  length: number;
  status: SpanStatus;
  message?: string;
  goals?: string;
  hyperlinks: Hyperlink[];
  queryResult?: string;
}

export interface Decoration {
  kind: "error" | "pending";
  start: number;
  end: number;
  message?: string;
}

export class DocumentStore {
  revision = 0;
  spans: SpanState[] = [];
  private byId = new Map<number, SpanState>();
  dropped = 0; // stale feedback messages ignored (observability)

  apply(msg: ServerMessage): boolean {
    switch (msg.type) {
      case "hello":
        return true;
      case "ack":
        return true;
      case "spans": {
        if (msg.revision < this.revision) return false;
        this.revision = msg.revision;
        this.spans = msg.spans.map((s: SpanInfo) => ({
          id: s.id,
          offset: s.offset,
          length: s.length,
          status: "unknown" as SpanStatus,
          hyperlinks: [],
        }));
        this.byId = new Map(this.spans.map((s) => [s.id, s]));
        return true;
      }
      case "feedback":
        return this.applyFeedback(msg);
    }
  }

  private applyFeedback(msg: FeedbackMsg): boolean {
    if (msg.revision !== this.revision) {
      this.dropped += 1;
      return false;
    }
    const span = this.byId.get(msg.span_id);
    if (span === undefined) {
      if (msg.span_id !== -1) this.dropped += 1;
      return false;
    }
    switch (msg.kind) {
      case "status":
        if (msg.status !== undefined) {
          span.status = msg.status;
          span.message = msg.message;
        }
        break;
      case "goals":
        span.goals = msg.text;
        break;
      case "markup":
        span.hyperlinks = msg.hyperlinks ?? [];
        break;
      case "query_result":
        span.queryResult = msg.text;
        break;
    }
    return true;
  }

  get(spanId: number): SpanState | undefined {
    return this.byId.get(spanId);
  }

  spanAt(position: number): SpanState | undefined {
    for (const span of this.spans) {
      if (position >= span.offset && position <= span.offset + span.length) {
        return span;
      }
    }
    return undefined;
  }

  spansIn(start: number, end: number): SpanState[] {
    return this.spans.filter(
      (s) => s.offset < end && s.offset + s.length > start,
    );
  }

  /** Mark spans touched by a local edit as unknown until the server reports. */
  invalidateFrom(position: number): void {
    for (const span of this.spans) {
      if (span.offset + span.length >= position) {
        span.status = "unknown";
        span.goals = undefined;
      }
    }
  }

  /** What the editor should draw: red error ranges, subtle pending marks. */
  decorations(): Decoration[] {
    const out: Decoration[] = [];
    for (const span of this.spans) {
      if (span.status === "failed") {
        out.push({
          kind: "error",
          start: span.offset,
          end: span.offset + span.length,
          message: span.message,
        });
      } else if (span.status === "processing") {
        out.push({
          kind: "pending",
          start: span.offset,
          end: span.offset + span.length,
        });
      }
    }
    return out;
  }

  hyperlinkAt(position: number): Hyperlink | undefined {
    for (const span of this.spans) {
      for (const link of span.hyperlinks) {
        if (position >= link.char_range[0] && position < link.char_range[1]) {
          return link;
        }
      }
    }
    return undefined;
  }
}
