/** Shared test doubles: an in-memory socket and a scriptable server side. */

import { Connection, type SocketLike } from "../src/connection.js";
import { EditorController } from "../src/controller.js";
import { applyEdits } from "../src/edits.js";
import type { ClientMessage } from "../src/protocol.js";

export class FakeSocket implements SocketLike {
  sent: string[] = [];
  closed = false;
  onopen: (() => void) | null = null;
  onmessage: ((event: { data: string }) => void) | null = null;
  onclose: (() => void) | null = null;

  send(data: string): void {
    this.sent.push(data);
  }

  close(): void {
    this.closed = true;
    this.onclose?.();
  }

  open(): void {
    this.onopen?.();
  }

  receive(message: object): void {
    this.onmessage?.({ data: JSON.stringify(message) });
  }
}

export interface Harness {
  controller: EditorController;
  connection: Connection;
  socket: () => FakeSocket;
  sentMessages: () => ClientMessage[];
  serverText: () => string;
}

/** A connected controller whose fake server mirrors update edits into text. */
export function makeHarness(): Harness {
  let current: FakeSocket = new FakeSocket();
  const sockets: FakeSocket[] = [];
  const connection = new Connection(() => {
    current = new FakeSocket();
    sockets.push(current);
    queueMicrotask(() => current.open());
    return current;
  });
  const controller = new EditorController(connection);
  connection.connect();
  current.open();

  const sentMessages = (): ClientMessage[] =>
    sockets.flatMap((s) => s.sent.map((line) => JSON.parse(line)));

  const serverText = (): string => {
    // replay every update the way the server applies ops, resetting on
    // fresh document ids
    let text = "";
    let doc = "";
    for (const msg of sentMessages()) {
      if (msg.type !== "update") continue;
      if (msg.document_id !== doc) {
        doc = msg.document_id;
        text = "";
      }
      text = applyEdits(text, msg.edits);
    }
    return text;
  };

  return {
    controller,
    connection,
    socket: () => current,
    sentMessages,
    serverText,
  };
}
