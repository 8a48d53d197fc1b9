/** Message types mirroring the server's JSON protocol, plus a safe parser.
 *
 * The client is dumb: it never computes prover state, it only renders what
 * these messages carry.
 */

export interface RetainOp {
  op: "retain";
  count: number;
}

export interface InsertOp {
  op: "insert";
  text: string;
}

export interface DeleteOp {
  op: "delete";
  count: number;
}

export type EditOp = RetainOp | InsertOp | DeleteOp;

export interface UpdateMsg {
  type: "update";
  document_id: string;
  edits: EditOp[];
}

export interface PerspectiveMsg {
  type: "perspective";
  document_id: string;
  span_ids: number[];
}

export interface QueryMsg {
  type: "query";
  span_id: number;
  text: string;
}

export type ClientMessage =
  | UpdateMsg
  | PerspectiveMsg
  | QueryMsg
  | { type: "shutdown" };

export interface HelloMsg {
  type: "hello";
  version: number;
}

export interface AckMsg {
  type: "ack";
  document_id: string;
  revision: number;
}

export interface SpanInfo {
  id: number;
  offset: number;
  length: number;
}

export interface SpansMsg {
  type: "spans";
  document_id: string;
  revision: number;
  spans: SpanInfo[];
}

export interface Hyperlink {
  char_range: [number, number];
  target: number;
  name: string;
}

export interface FeedbackMsg {
  type: "feedback";
  span_id: number;
  revision: number;
  kind: "status" | "goals" | "markup" | "query_result";
  status?: "processing" | "processed" | "failed";
  message?: string;
  char_range?: [number, number];
  text?: string;
  hyperlinks?: Hyperlink[];
}

export type ServerMessage = HelloMsg | AckMsg | SpansMsg | FeedbackMsg;

const SERVER_TYPES = new Set(["hello", "ack", "spans", "feedback"]);

/** Parse one line from the server; null for anything unrecognizable. */
export function parseServerMessage(line: string): ServerMessage | null {
  let data: unknown;
  try {
    data = JSON.parse(line);
  } catch {
    return null;
  }
  if (typeof data !== "object" || data === null) return null;
  const type = (data as { type?: unknown }).type;
  if (typeof type !== "string" || !SERVER_TYPES.has(type)) return null;
  return data as ServerMessage;
}
