/** Websocket wrapper: outbound queueing while disconnected, resync on
 * reconnect under a fresh document id. The socket is injectable so tests can
 * drive the whole client without a network.
 */

import type { ClientMessage, ServerMessage } from "./protocol.js";
import { parseServerMessage } from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((event: { data: string }) => void) | null;
  onclose: (() => void) | null;
}

export type SocketFactory = () => SocketLike;

export class Connection {
  state: "connecting" | "open" | "closed" = "closed";
  documentId = "";
  private socket: SocketLike | null = null;
  private queued: string[] = [];
  private docCounter = 0;
  private handlers: Array<(msg: ServerMessage) => void> = [];
  private reconnectHandlers: Array<() => void> = [];
  resyncs = 0;

  constructor(private readonly factory: SocketFactory) {}

  connect(): void {
    this.state = "connecting";
    this.docCounter += 1;
    this.documentId = `doc-${this.docCounter}`;
    const socket = this.factory();
    this.socket = socket;
    socket.onopen = () => {
      this.state = "open";
      // a fresh document id means the server starts from nothing: whoever
      // owns the buffer must resync its full content first
      if (this.docCounter > 1) this.resyncs += 1;
      for (const handler of this.reconnectHandlers) handler();
      const queued = this.queued;
      this.queued = [];
      for (const line of queued) socket.send(line);
    };
    socket.onmessage = (event) => {
      const msg = parseServerMessage(event.data);
      if (msg === null) return;
      for (const handler of this.handlers) handler(msg);
    };
    socket.onclose = () => {
      this.state = "closed";
      this.socket = null;
    };
  }

  onMessage(handler: (msg: ServerMessage) => void): void {
    this.handlers.push(handler);
  }

  /** Called when a (re)connection opens; the editor resyncs its buffer. */
  onOpen(handler: () => void): void {
    this.reconnectHandlers.push(handler);
  }

  send(message: ClientMessage): void {
    const line = JSON.stringify(message);
    if (this.state === "open" && this.socket !== null) {
      this.socket.send(line);
    } else {
      this.queued.push(line);
    }
  }

  close(): void {
    this.socket?.close();
    this.state = "closed";
  }
}
