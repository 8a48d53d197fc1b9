/** Boot: connect the websocket bridge and mount the editor. */

import { Connection, type SocketLike } from "./connection.js";
import { EditorController } from "./controller.js";
import { mountEditor } from "./editor.js";

function webSocketFactory(): SocketLike {
  const proto = location.protocol === "https:" ? "wss" : "ws";
  return new WebSocket(`${proto}://${location.host}/ws`) as unknown as SocketLike;
}

const connection = new Connection(webSocketFactory);
const controller = new EditorController(connection);
mountEditor(controller, document.getElementById("app")!);
connection.connect();
