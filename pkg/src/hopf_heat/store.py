from __future__ import annotations

import json
import sqlite3
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunRecord:
    run_id: str
    command: str
    seed: int
    status: str
    started_at: str
    finished_at: Optional[str]
    wall_time_s: Optional[float]
    output_path: str
    message: str
    meta_json: str


SCHEMA = r"""
CREATE TABLE IF NOT EXISTS runs (
  run_id TEXT PRIMARY KEY,
  command TEXT NOT NULL,
  seed TEXT NOT NULL,
  status TEXT NOT NULL,
  started_at TEXT NOT NULL,
  finished_at TEXT,
  wall_time_s REAL,
  output_path TEXT NOT NULL,
  message TEXT NOT NULL,
  meta_json TEXT NOT NULL
);

CREATE INDEX IF NOT EXISTS idx_runs_command_started_at ON runs(command, started_at);
"""


class RunStore:
    """Ledger of experiment runs; result files never carry timing, this table does."""

    def __init__(self, db_path: Path):
        self.db_path = db_path
        self._init()

    def _conn(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn

    def _init(self) -> None:
        with self._conn() as c:
            c.executescript(SCHEMA)

    def create_run(self, *, run_id: str, command: str, seed: int, started_at: str, output_path: str,
                   meta: dict[str, Any]) -> None:
        # seeds span the full u64 range, past sqlite's signed integers
        with self._conn() as c:
            c.execute(
                "INSERT INTO runs (run_id,command,seed,status,started_at,finished_at,wall_time_s,"
                "output_path,message,meta_json) "
                "VALUES (?,?,?,?,?,?,?,?,?,?)",
                (run_id, command, str(seed), "running", started_at, None, None, output_path, "",
                 json.dumps(meta, ensure_ascii=False)),
            )

    def finish_run(self, *, run_id: str, status: str, message: str, finished_at: str, wall_time_s: float,
                   meta_updates: dict[str, Any] | None = None) -> None:
        with self._conn() as c:
            row = c.execute("SELECT meta_json FROM runs WHERE run_id=?", (run_id,)).fetchone()
            meta = json.loads(row["meta_json"]) if row else {}
            if meta_updates:
                meta.update(meta_updates)
            c.execute(
                "UPDATE runs SET status=?, message=?, finished_at=?, wall_time_s=?, meta_json=? WHERE run_id=?",
                (status, message, finished_at, wall_time_s, json.dumps(meta, ensure_ascii=False), run_id),
            )

    def list_runs(self, *, limit: int = 50, command: str | None = None) -> list[RunRecord]:
        q = "SELECT * FROM runs "
        params: tuple[Any, ...] = ()
        if command:
            q += "WHERE command=? "
            params = (command,)
        q += "ORDER BY started_at DESC LIMIT ?"
        with self._conn() as c:
            rows = c.execute(q, (*params, limit)).fetchall()
            out = []
            for r in rows:
                d = dict(r)
                d["seed"] = int(d["seed"])
                out.append(RunRecord(**d))
            return out
