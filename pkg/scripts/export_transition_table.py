#!/usr/bin/env python3
"""Dump the full machine transition table as JSON (for docs and UI display).

Usage: python scripts/export_transition_table.py [out.json]
"""

import json
import sys

from cellflow.statemachine import transition_table


def main() -> int:
    rows = transition_table()
    text = json.dumps(rows, indent=2)
    if len(sys.argv) > 1:
        with open(sys.argv[1], "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"wrote {len(rows)} rows to {sys.argv[1]}")
    else:
        print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
