#!/usr/bin/env python3
"""Synthetic benchmark demo: builds three file-producing tasks, runs them
under the harness with a scripted model, and prints the report table plus
transition statistics.

Usage: python scripts/run_benchmark_demo.py [outdir]
"""

import json
import sys
import tempfile
from pathlib import Path

from cellflow.evalharness import BenchConfig, run_benchmark
from cellflow.llmgateway import ScriptedProvider
from cellflow.orchestrator import SessionConfig

REPLIES = [
    "```markdown\n[STEP GOAL]: Inspect the input\n```\n"
    "```python\nrows = open('input/data.csv').read().strip().splitlines()\nprint(len(rows))\n```",
    "<end_step>",
    "<Advance to Next STEP>\n```markdown\n[STEP GOAL]: Write the submission\n```\n"
    "```python\nwith open('submission.csv', 'w') as fh:\n"
    "    fh.write('id,value\\n')\n"
    "    for i, row in enumerate(rows[1:]):\n"
    "        fh.write(f'{i},{len(row)}\\n')\n```",
    "<end_step>",
    "<Fulfill USER INSTRUCTION>\n```markdown\nSubmission written.\n```",
]


def build_tasks(base: Path, n: int = 3) -> Path:
    tasks = base / "tasks"
    for i in range(n):
        d = tasks / f"demo{i}"
        (d / "input").mkdir(parents=True)
        (d / "input" / "data.csv").write_text("id,x\n" + "\n".join(f"{j},{j*i}" for j in range(5)) + "\n")
        (d / "instruction.txt").write_text(
            "Read input/data.csv and write a submission.csv with an id,value header."
        )
        (d / "manifest.json").write_text(
            json.dumps(
                {
                    "id": f"demo{i}",
                    "instruction_path": "instruction.txt",
                    "input_dir": "input",
                    "expected_artifact": "submission.csv",
                    "grader": {"kind": "file_exists"},
                },
                indent=2,
            )
        )
    return tasks


def main() -> int:
    outdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="bench-"))
    tasks = build_tasks(outdir)
    config = BenchConfig(
        session_config=SessionConfig(task_timeout_s=120.0),
        limit_seconds=120.0,
        provider_factory=lambda manifest: ScriptedProvider(REPLIES),
        work_root=outdir / "work",
    )
    report = run_benchmark(tasks, config)
    print(report.render_table())
    out = outdir / "report.json"
    out.write_text(json.dumps(report.to_json(), indent=2))
    print(f"report: {out}")
    return 0 if report.success_rate == 1.0 else 1


if __name__ == "__main__":
    sys.exit(main())
