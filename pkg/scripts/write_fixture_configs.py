"""Dump the calibrated fixtures to configs/*.json so the CLI can run them.

    python3 scripts/write_fixture_configs.py
"""
import json
from pathlib import Path

from coral.fixtures import FIXTURES

root = Path(__file__).resolve().parent.parent / "configs"
for name, raw in FIXTURES.items():
    (root / f"{name}_fixture.json").write_text(json.dumps(raw, indent=2) + "\n")
    print("wrote", root / f"{name}_fixture.json")
