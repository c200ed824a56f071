/** DOM wiring: one session tab = one stream subscription feeding the store,
 * re-rendered after every event.  All displayed state derives from the
 * store's view plus the local draft input. */

import { ApiError, interruptSession, submitInstruction } from "./api.js";
import { highlightCode, renderMarkdown, escapeHtml } from "./markdown.js";
import { EventStreamClient } from "./stream.js";
import type { ViewBlock, ViewModel } from "./types.js";
import { TraceStore } from "./viewmodel.js";

function blockHtml(block: ViewBlock, baseUrl: string, sessionId: string): string {
  const badge = block.origin
    ? `<span class="badge badge-${block.origin}">${block.origin}</span>`
    : "";
  const spliced = block.spliced ? '<span class="badge badge-spliced">repaired</span>' : "";
  switch (block.kind) {
    case "instruction":
      return `<div class="block instruction"><span class="badge badge-user">user</span>${renderMarkdown(
        block.source ?? "",
      )}</div>`;
    case "markdown":
      return `<div class="block markdown">${badge}${spliced}${renderMarkdown(block.source ?? "")}</div>`;
    case "code":
      return `<div class="block code">${badge}${spliced}<pre class="code">${highlightCode(
        block.source ?? "",
      )}</pre></div>`;
    case "warning":
      return `<div class="block warning"><span class="badge badge-warning">warning</span><pre>${escapeHtml(
        block.source ?? "",
      )}</pre></div>`;
    case "output": {
      const output = block.output!;
      if (output.channel === "error") {
        const trace = (output.traceback ?? []).join("\n");
        return `<div class="block output error"><pre>${escapeHtml(
          `${output.error_name}: ${output.error_value ?? ""}\n${trace}`,
        )}</pre></div>`;
      }
      if (output.channel === "rich" && output.payload_path) {
        const src = `${baseUrl}/sessions/${sessionId}/payload/${output.payload_path}`;
        return `<div class="block output rich"><img src="${src}" alt="${escapeHtml(
          output.payload_path,
        )}"></div>`;
      }
      return `<div class="block output ${output.channel}"><pre>${escapeHtml(
        output.text ?? "",
      )}</pre></div>`;
    }
  }
}

function statusHtml(view: ViewModel): string {
  const budgets = view.budgets;
  const caps = budgets
    ? `plan ${view.counters.planning_entries}/${budgets.max_planning_number} · ` +
      `nodes ${view.counters.nonroot_nodes}/${budgets.max_planning_execution_number ?? "∞"}`
    : "";
  return (
    `<span class="state state-${view.state}">${view.state}</span>` +
    `<span class="meta">calls ${view.counters.llm_calls} · repairs ${view.counters.repair_episodes}` +
    (caps ? ` · ${caps}` : "") +
    ` · cost $${view.costTotal.toFixed(4)}</span>` +
    (view.outcome ? `<span class="outcome">${view.outcome}</span>` : "")
  );
}

export function mountApp(root: HTMLElement, baseUrl: string, sessionId: string): () => void {
  root.innerHTML = `
    <header id="status"></header>
    <section id="trace"></section>
    <details id="history"><summary>history (replaced and repaired turns)</summary>
      <div id="history-body"></div></details>
    <footer>
      <form id="controls">
        <textarea id="draft" rows="2" placeholder="Instruction or follow-up feedback…"></textarea>
        <button id="send" type="submit">Send</button>
        <button id="interrupt" type="button">Interrupt</button>
      </form>
      <div id="notice"></div>
    </footer>`;

  const store = new TraceStore();
  const trace = root.querySelector<HTMLElement>("#trace")!;
  const status = root.querySelector<HTMLElement>("#status")!;
  const historyBody = root.querySelector<HTMLElement>("#history-body")!;
  const draft = root.querySelector<HTMLTextAreaElement>("#draft")!;
  const send = root.querySelector<HTMLButtonElement>("#send")!;
  const interrupt = root.querySelector<HTMLButtonElement>("#interrupt")!;
  const notice = root.querySelector<HTMLElement>("#notice")!;

  const render = () => {
    const view = store.view();
    status.innerHTML = statusHtml(view);
    trace.innerHTML = view.blocks.map((b) => blockHtml(b, baseUrl, sessionId)).join("\n");
    historyBody.innerHTML = view.history
      .map(
        (group) =>
          `<div class="history-group"><h4>${escapeHtml(group.title)}</h4>` +
          group.blocks.map((b) => blockHtml(b, baseUrl, sessionId)).join("\n") +
          `</div>`,
      )
      .join("\n");
    draft.disabled = !view.pendingInput;
    send.disabled = !view.pendingInput;
    trace.scrollTop = trace.scrollHeight;
  };

  const stream = new EventStreamClient(baseUrl, sessionId, (event) => {
    store.ingest([event]);
    render();
  });
  void stream.run();

  root.querySelector<HTMLFormElement>("#controls")!.addEventListener("submit", async (e) => {
    e.preventDefault();
    const text = draft.value.trim();
    if (!text) return;
    send.disabled = true; // optimistic; cleared by the next streamed event
    notice.textContent = "";
    try {
      await submitInstruction(baseUrl, sessionId, text);
      draft.value = "";
    } catch (error) {
      notice.textContent =
        error instanceof ApiError && error.busy ? "Session is busy." : String(error);
      render();
    }
  });
  interrupt.addEventListener("click", async () => {
    try {
      await interruptSession(baseUrl, sessionId);
    } catch (error) {
      notice.textContent = String(error);
    }
  });

  render();
  return () => {
    stream.stop();
  };
}
