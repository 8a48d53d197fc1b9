/** DOM binding: textarea with a decoration overlay, goal panel, status bar.
 *
 * The textarea owns the text; an exactly-aligned backdrop renders underlines
 * behind it. All state comes from the controller.
 */

import type { EditorController } from "./controller.js";

export function mountEditor(
  controller: EditorController,
  root: HTMLElement,
): void {
  root.innerHTML = `
    <div class="workbench">
      <div class="editor-pane">
        <div class="editor-stack">
          <div class="backdrop"><div class="highlights"></div></div>
          <textarea class="buffer" spellcheck="false"
                    placeholder="Write your document here..."></textarea>
        </div>
        <div class="statusbar"></div>
      </div>
      <aside class="goal-pane">
        <header>
          <span>Goals</span>
          <label><input type="checkbox" class="pin"> Do not follow caret</label>
        </header>
        <pre class="goals"></pre>
        <div class="hover"></div>
      </aside>
    </div>`;

  const textarea = root.querySelector<HTMLTextAreaElement>(".buffer")!;
  const highlights = root.querySelector<HTMLDivElement>(".highlights")!;
  const backdrop = root.querySelector<HTMLDivElement>(".backdrop")!;
  const goals = root.querySelector<HTMLPreElement>(".goals")!;
  const pin = root.querySelector<HTMLInputElement>(".pin")!;
  const statusbar = root.querySelector<HTMLDivElement>(".statusbar")!;
  const hover = root.querySelector<HTMLDivElement>(".hover")!;

  const syncFromTextarea = () => {
    controller.setBuffer(textarea.value, textarea.selectionStart);
  };
  textarea.addEventListener("input", syncFromTextarea);
  const caretMoved = () => {
    controller.setCaret(textarea.selectionStart);
    controller.setViewport(...visibleRange());
  };
  textarea.addEventListener("keyup", caretMoved);
  textarea.addEventListener("click", caretMoved);
  textarea.addEventListener("scroll", () => {
    backdrop.scrollTop = textarea.scrollTop;
    controller.setViewport(...visibleRange());
  });
  pin.addEventListener("change", () => {
    if (pin.checked) {
      const panel = controller.goalPanel();
      controller.pin(panel.spanId);
    } else {
      controller.pin(null);
    }
  });

  function visibleRange(): [number, number] {
    // approximate the visible character range from scroll position
    const lineHeight = parseFloat(getComputedStyle(textarea).lineHeight) || 18;
    const firstLine = Math.floor(textarea.scrollTop / lineHeight);
    const lastLine =
      firstLine + Math.ceil(textarea.clientHeight / lineHeight) + 1;
    const lines = textarea.value.split("\n");
    let offset = 0;
    let start = 0;
    let end = textarea.value.length;
    for (let i = 0; i < lines.length; i++) {
      if (i === firstLine) start = offset;
      offset += lines[i].length + 1;
      if (i === lastLine) {
        end = offset;
        break;
      }
    }
    return [start, end];
  }

  function escapeHtml(text: string): string {
    return text
      .replace(/&/g, "&amp;")
      .replace(/</g, "&lt;")
      .replace(/>/g, "&gt;");
  }

  function render(): void {
    // decorations as marked ranges inside a mirror of the text
    const text = textarea.value;
    const marks = controller
      .decorations()
      .slice()
      .sort((a, b) => a.start - b.start);
    let html = "";
    let cursor = 0;
    for (const mark of marks) {
      if (mark.start < cursor) continue;
      html += escapeHtml(text.slice(cursor, mark.start));
      const cls = mark.kind === "error" ? "err" : "pend";
      html += `<mark class="${cls}">${escapeHtml(
        text.slice(mark.start, mark.end),
      )}</mark>`;
      cursor = mark.end;
    }
    html += escapeHtml(text.slice(cursor));
    highlights.innerHTML = html + "\n";

    const panel = controller.goalPanel();
    goals.textContent = panel.text || "(no goal at caret)";

    const span = controller.store.spanAt(controller.caret);
    const failed = marks.filter((m) => m.kind === "error").length;
    const pending = marks.filter((m) => m.kind === "pending").length;
    statusbar.textContent =
      `rev ${controller.store.revision} · ${controller.store.spans.length} ` +
      `spans · ${failed} failed · ${pending} pending` +
      (span?.message ? ` · ${span.message}` : "");
    hover.textContent = span?.queryResult ?? "";
  }

  controller.onRender(render);
  controller.connection.onOpen(() => render());
  render();
}
