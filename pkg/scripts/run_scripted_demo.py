#!/usr/bin/env python3
"""End-to-end demo on a scripted model: records a session with one repair
episode, exports the notebook, then replays the transcript and verifies the
normalized byte-identity.

Usage: python scripts/run_scripted_demo.py [outdir]
"""

import sys
import tempfile
from pathlib import Path

from cellflow.cellmodel import SessionMeta, write_notebook
from cellflow.llmgateway import ScriptedProvider
from cellflow.orchestrator import Session, SessionConfig, SessionDeps, replay_transcript
from cellflow.transcript import load_events, normalize_events, normalize_file
from cellflow.trajectory import trace_cells_from_events

REPLIES = [
    # initial turn: a step goal whose first attempt fails
    "```markdown\n[STEP GOAL]: Compute a checksum of the numbers 1..10\n```\n"
    "```python\ntotal = sum(numbers)\nprint(total)\n```",
    # debugging
    "<await>\n```python\nnumbers = list(range(1, 11))\nprint(len(numbers))\n```",
    "<end_debug>",
    # post-filtering: cleaned, self-contained replacement
    "<debug_success>\n"
    "```markdown\nThe name `numbers` was never defined; the clean version defines it.\n```\n"
    "```python\nnumbers = list(range(1, 11))\ntotal = sum(numbers)\nprint(total)\n```",
    # continue the step, then plan, then finish
    "<await>\n```python\nchecksum = total * 7\nprint(checksum)\n```",
    "<end_step>",
    "<Fulfill USER INSTRUCTION>\n```markdown\nThe checksum is 385 (victory lap: 55 * 7).\n```",
]


def main() -> int:
    outdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="demo-"))
    workdir = outdir / "session"
    config = SessionConfig(workdir=str(workdir), task_timeout_s=120.0)
    session = Session(config, SessionDeps(provider=ScriptedProvider(REPLIES)))
    try:
        result = session.run("Compute a checksum over the numbers 1..10 and report it.")
        notebook_path = outdir / "trace.ipynb"
        write_notebook(
            notebook_path,
            trace_cells_from_events(session.transcript.events()),
            SessionMeta(session_id=session.handle.session_id),
            workdir=workdir,
        )
        print(f"outcome:     {result.outcome.value}")
        print(f"llm calls:   {result.counters.llm_calls}")
        print(f"repairs:     {result.counters.repair_episodes}")
        print(f"transcript:  {session.transcript.path}")
        print(f"notebook:    {notebook_path}")
    finally:
        session.close()

    events = load_events(session.transcript.path)
    replay_dir = outdir / "replay"
    replay_transcript(events, replay_dir, transcript_path=replay_dir / "transcript.jsonl")
    identical = normalize_events(events) == normalize_file(replay_dir / "transcript.jsonl")
    print(f"replay byte-identical (normalized): {identical}")
    return 0 if identical else 1


if __name__ == "__main__":
    sys.exit(main())
