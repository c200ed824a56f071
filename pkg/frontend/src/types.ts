/** Transcript event and cell records, mirroring the engine's JSONL schema. */

export interface OutputRecord {
  channel: "stdout" | "stderr" | "rich" | "error";
  text?: string;
  mime?: string | null;
  payload_path?: string | null;
  error_name?: string | null;
  error_value?: string | null;
  traceback?: string[];
  truncated?: boolean;
}

export interface CellRecord {
  id: string;
  kind: "markdown" | "code";
  language_tag: string;
  source: string;
  outputs: OutputRecord[];
  origin_stage: string;
}

export interface TranscriptEvent {
  seq: number;
  wall_clock: number;
  type:
    | "user_input"
    | "llm_call"
    | "action"
    | "execution"
    | "transition"
    | "forced"
    | "repair_outcome"
    | "final";
  payload: Record<string, unknown>;
}

export interface Budgets {
  max_planning_number: number;
  max_execution_number: number;
  max_debug_number: number;
  max_planning_execution_number: number | null;
  max_repair_episodes?: number;
}

export interface Counters {
  llm_calls: number;
  planning_entries: number;
  repair_episodes: number;
  nonroot_nodes: number;
}

/** One visual block in the rendered trace. */
export interface ViewBlock {
  kind: "markdown" | "code" | "output" | "instruction" | "warning";
  cellId?: string;
  origin?: string;
  source?: string;
  languageTag?: string;
  output?: OutputRecord;
  /** set on cells that replaced a faulty turn via post-filtering */
  spliced?: boolean;
  note?: string;
}

/** A collapsed group of blocks reachable through the history toggle. */
export interface HistoryGroup {
  title: string;
  blocks: ViewBlock[];
}

export interface ViewModel {
  blocks: ViewBlock[];
  history: HistoryGroup[];
  state: string;
  outcome: string | null;
  counters: Counters;
  budgets: Budgets | null;
  costTotal: number;
  pendingInput: boolean;
  lastSeq: number;
  instructions: string[];
}
