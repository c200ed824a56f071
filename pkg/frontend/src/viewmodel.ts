/**
 * Pure reduction of a transcript event stream into the view model.
 *
 * The view is a function of the event prefix alone: rendering the same
 * events always yields the same model, so a reconnect that replays the
 * stream reproduces the exact view.  Malformed frames never throw; they
 * surface as warning blocks.
 */

import type {
  Budgets,
  CellRecord,
  Counters,
  HistoryGroup,
  TranscriptEvent,
  ViewBlock,
  ViewModel,
} from "./types.js";

interface VmNode {
  id: string;
  kind: "root" | "step_goal" | "exec_turn" | "repair_report";
  parent: string | null;
  children: string[];
  replaced: boolean;
  cells: CellRecord[];
  observations: CellRecord[];
  goal: string | null;
  spliced: boolean;
}

interface ReduceState {
  nodes: Map<string, VmNode>;
  order: string[]; // creation order of node ids
  preamble: CellRecord[];
  instructions: { text: string; afterNode: number }[];
  episode: CellRecord[][]; // executed turns of the live repair episode
  pendingEpisodeStage: boolean;
  state: string;
  outcome: string | null;
  budgets: Budgets | null;
  priceTable: Record<string, { input: number; output: number }>;
  model: string;
  llmCalls: number;
  planningEntries: number;
  repairEpisodes: number;
  cost: number;
  warnings: string[];
  history: HistoryGroup[];
}

function freshState(): ReduceState {
  const root: VmNode = {
    id: "n0",
    kind: "root",
    parent: null,
    children: [],
    replaced: false,
    cells: [],
    observations: [],
    goal: null,
    spliced: false,
  };
  return {
    nodes: new Map([["n0", root]]),
    order: [],
    preamble: [],
    instructions: [],
    episode: [],
    pendingEpisodeStage: false,
    state: "idle",
    outcome: null,
    budgets: null,
    priceTable: {},
    model: "",
    llmCalls: 0,
    planningEntries: 0,
    repairEpisodes: 0,
    cost: 0,
    warnings: [],
    history: [],
  };
}

function tail(s: ReduceState): VmNode {
  let node = s.nodes.get("n0")!;
  for (;;) {
    const live = node.children
      .map((id) => s.nodes.get(id)!)
      .filter((n) => !n.replaced);
    if (live.length === 0) return node;
    node = live[live.length - 1];
  }
}

function spine(s: ReduceState): VmNode[] {
  const path: VmNode[] = [];
  let node = s.nodes.get("n0")!;
  for (;;) {
    path.push(node);
    const live = node.children
      .map((id) => s.nodes.get(id)!)
      .filter((n) => !n.replaced);
    if (live.length === 0) return path;
    node = live[live.length - 1];
  }
}

function currentStep(s: ReduceState): VmNode | null {
  const path = spine(s);
  for (let i = path.length - 1; i >= 0; i--) {
    if (path[i].goal !== null) return path[i];
  }
  return null;
}

function markReplaced(s: ReduceState, node: VmNode): void {
  node.replaced = true;
  for (const id of node.children) markReplaced(s, s.nodes.get(id)!);
}

function cellBlocks(cells: CellRecord[], spliced = false): ViewBlock[] {
  const blocks: ViewBlock[] = [];
  for (const cell of cells) {
    blocks.push({
      kind: cell.kind,
      cellId: cell.id,
      origin: cell.origin_stage,
      source: cell.source,
      languageTag: cell.language_tag,
      spliced: spliced || undefined,
    });
    for (const output of cell.outputs ?? []) {
      blocks.push({ kind: "output", cellId: cell.id, origin: cell.origin_stage, output });
    }
  }
  return blocks;
}

function nodeBlocks(node: VmNode): ViewBlock[] {
  return [
    ...cellBlocks(node.observations),
    ...cellBlocks(node.cells, node.spliced),
  ];
}

function applyEvent(s: ReduceState, event: TranscriptEvent): void {
  const payload = event.payload as any;
  switch (event.type) {
    case "user_input": {
      s.instructions.push({ text: String(payload.instruction ?? ""), afterNode: s.order.length });
      const config = payload.config ?? {};
      s.budgets = (config.budgets as Budgets) ?? s.budgets;
      s.model = String(config.model ?? s.model);
      const prices = config.price_table ?? {};
      for (const [model, p] of Object.entries<any>(prices)) {
        s.priceTable[model] = { input: Number(p.input), output: Number(p.output) };
      }
      break;
    }
    case "action": {
      const cells = (payload.cells ?? []) as CellRecord[];
      if (payload.stage === "init") {
        s.preamble = cells;
        break;
      }
      const nodeId = payload.node_id as string | null;
      if (!nodeId) {
        // debugging / post-filtering turn: buffered until the episode ends
        if (payload.stage === "debug" || payload.stage === "filter") {
          s.episode.push(cells);
          s.pendingEpisodeStage = true;
        }
        break;
      }
      const observations = (payload.observations ?? []) as CellRecord[];
      const op = payload.tree_op as string;
      const node: VmNode = {
        id: nodeId,
        kind: op === "turn" ? "exec_turn" : "step_goal",
        parent: null,
        children: [],
        replaced: false,
        cells,
        observations,
        goal: (payload.goal_text as string) ?? null,
        spliced: false,
      };
      if (op === "backtrack") {
        const step = currentStep(s);
        if (step && step.kind !== "root") {
          s.history.push({
            title: `replaced step: ${step.goal ?? step.id}`,
            blocks: nodeBlocks(step),
          });
          markReplaced(s, step);
          node.parent = step.parent;
          s.nodes.get(step.parent!)!.children.push(nodeId);
        } else {
          node.parent = tail(s).id;
          s.nodes.get(node.parent)!.children.push(nodeId);
        }
      } else {
        const parent = tail(s);
        node.parent = parent.id;
        parent.children.push(nodeId);
      }
      s.nodes.set(nodeId, node);
      s.order.push(nodeId);
      break;
    }
    case "execution": {
      const cells = (payload.cells ?? []) as CellRecord[];
      const nodeId = payload.node_id as string | null;
      if (nodeId && s.nodes.has(nodeId)) {
        s.nodes.get(nodeId)!.cells = cells;
      } else if (s.pendingEpisodeStage && s.episode.length > 0) {
        s.episode[s.episode.length - 1] = cells;
        s.pendingEpisodeStage = false;
      }
      break;
    }
    case "repair_outcome": {
      const nodeId = payload.node_id as string;
      const node = s.nodes.get(nodeId);
      const replacement = ((payload.replacement as any)?.cells ?? []) as CellRecord[];
      if (!node) break;
      const faulty = nodeBlocks(node);
      const episodeBlocks = s.episode.flatMap((turn) => cellBlocks(turn));
      s.history.push({
        title:
          payload.kind === "success"
            ? `repaired turn ${nodeId} (episode of ${payload.episode_turns ?? 0})`
            : `failed repair of turn ${nodeId}`,
        blocks: [...faulty, ...episodeBlocks],
      });
      if (payload.kind === "success") {
        const goalCell = node.cells.find(
          (c) => c.kind === "markdown" && c.source.startsWith("[STEP GOAL]:"),
        );
        const hasGoal = replacement.some(
          (c) => c.kind === "markdown" && c.source.startsWith("[STEP GOAL]:"),
        );
        node.cells =
          node.goal !== null && goalCell && !hasGoal
            ? [goalCell, ...replacement]
            : replacement;
        node.spliced = true;
      } else {
        markReplaced(s, node);
        const report: VmNode = {
          id: `${nodeId}.report`,
          kind: "repair_report",
          parent: node.parent,
          children: [],
          replaced: false,
          cells: replacement,
          observations: [],
          goal: node.goal,
          spliced: true,
        };
        s.nodes.set(report.id, report);
        s.nodes.get(node.parent ?? "n0")!.children.push(report.id);
      }
      s.episode = [];
      s.pendingEpisodeStage = false;
      break;
    }
    case "transition": {
      s.state = String(payload.to ?? s.state);
      if (payload.to === "plan") s.planningEntries += 1;
      if (payload.to === "debug" && payload.from !== "debug") s.repairEpisodes += 1;
      break;
    }
    case "forced": {
      // overrides the immediately preceding transition's target
      if (s.state === "plan" && payload.from === "plan") s.planningEntries -= 1;
      s.state = String(payload.to ?? s.state);
      if (payload.to === "plan") s.planningEntries += 1;
      break;
    }
    case "llm_call": {
      s.llmCalls += 1;
      const usage = (payload.usage ?? {}) as any;
      const prices = s.priceTable[String(payload.model ?? s.model)];
      if (prices) {
        s.cost +=
          (Number(usage.prompt_tokens ?? 0) / 1000) * prices.input +
          (Number(usage.completion_tokens ?? 0) / 1000) * prices.output;
      }
      break;
    }
    case "final": {
      s.outcome = String(payload.outcome ?? "");
      s.state = "idle";
      const counters = (payload.counters ?? {}) as any;
      if (typeof counters.llm_calls === "number") s.llmCalls = counters.llm_calls;
      if (typeof counters.planning_entries === "number")
        s.planningEntries = counters.planning_entries;
      if (typeof counters.repair_episodes === "number")
        s.repairEpisodes = counters.repair_episodes;
      const cost = Number(payload.cost);
      if (!Number.isNaN(cost)) s.cost = cost;
      s.episode = [];
      break;
    }
    default:
      s.warnings.push(`unknown event type ${(event as any).type} at seq ${event.seq}`);
  }
}

function countNonroot(s: ReduceState): number {
  let n = 0;
  for (const node of s.nodes.values()) {
    if (node.kind === "step_goal" || node.kind === "exec_turn") n += 1;
  }
  return n;
}

/** Render a transcript prefix into the view. Pure; malformed frames become warnings. */
export function renderTrace(events: TranscriptEvent[]): ViewModel {
  const s = freshState();
  let lastSeq = 0;
  for (const event of events) {
    lastSeq = Math.max(lastSeq, event?.seq ?? lastSeq);
    try {
      applyEvent(s, event);
    } catch (error) {
      s.warnings.push(`malformed frame at seq ${event?.seq}: ${String(error)}`);
    }
  }

  const blocks: ViewBlock[] = [];
  for (const cell of s.preamble) blocks.push(...cellBlocks([cell]));
  const pending = [...s.instructions];
  const path = spine(s).filter((n) => n.kind !== "root");
  const ordinalOf = (id: string) =>
    id.endsWith(".report")
      ? s.order.indexOf(id.slice(0, -".report".length)) + 1
      : s.order.indexOf(id) + 1;
  for (const node of path) {
    while (pending.length > 0 && pending[0].afterNode < ordinalOf(node.id)) {
      blocks.push({ kind: "instruction", source: pending.shift()!.text });
    }
    blocks.push(...nodeBlocks(node));
  }
  for (const rest of pending) blocks.push({ kind: "instruction", source: rest.text });
  if (s.state === "debug" || s.state === "filter") {
    for (const turn of s.episode) blocks.push(...cellBlocks(turn));
  }
  for (const warning of s.warnings) blocks.push({ kind: "warning", source: warning });

  const counters: Counters = {
    llm_calls: s.llmCalls,
    planning_entries: s.planningEntries,
    repair_episodes: s.repairEpisodes,
    nonroot_nodes: countNonroot(s),
  };
  return {
    blocks,
    history: s.history,
    state: s.state,
    outcome: s.outcome,
    counters,
    budgets: s.budgets,
    costTotal: s.cost,
    pendingInput: s.state === "idle",
    lastSeq,
    instructions: s.instructions.map((i) => i.text),
  };
}

/** Incremental store over the stream; the view stays a pure function of the prefix. */
export class TraceStore {
  private events: TranscriptEvent[] = [];

  get lastSeq(): number {
    return this.events.length > 0 ? this.events[this.events.length - 1].seq : 0;
  }

  /** Append events; duplicates (by seq) are dropped, order is enforced. */
  ingest(batch: TranscriptEvent[]): void {
    for (const event of batch) {
      if (event.seq > this.lastSeq) this.events.push(event);
    }
  }

  view(): ViewModel {
    return renderTrace(this.events);
  }

  snapshotSeqs(): number[] {
    return this.events.map((e) => e.seq);
  }
}
