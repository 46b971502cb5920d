"""
Experiment Journal - SQLite database for tracking runs, update events and written artifacts
"""
import json
import logging
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd

logger = logging.getLogger(__name__)

JOURNAL_NAME = "journal.db"


def get_db_path(log_dir: Union[str, Path]) -> str:
    """Get the journal path inside the log directory."""
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)
    return str(log_dir / JOURNAL_NAME)


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write a log table as UTF-8 CSV with a header row and CRLF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\r\n")
    return path


class ExperimentJournal:
    """Manages the journal database recording every experiment run"""

    def __init__(self, db_path: str):
        self.db_path = db_path
        self._init_database()

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn

    def _init_database(self):
        """Create database tables if they don't exist"""
        conn = self._connect()
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT UNIQUE NOT NULL,
                command TEXT NOT NULL,
                model_name TEXT NOT NULL,
                seed INTEGER NOT NULL,
                status TEXT NOT NULL,
                summary TEXT,
                created_at TEXT NOT NULL,
                finished_at TEXT
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS update_events (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                step INTEGER NOT NULL,
                updater TEXT NOT NULL,
                branch TEXT NOT NULL,
                applied INTEGER NOT NULL,
                reason TEXT,
                loss REAL,
                sample TEXT,
                timestamp TEXT NOT NULL,
                FOREIGN KEY (run_id) REFERENCES runs(run_id)
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS artifacts (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                kind TEXT NOT NULL,
                path TEXT NOT NULL,
                timestamp TEXT NOT NULL,
                FOREIGN KEY (run_id) REFERENCES runs(run_id)
            )
        """)

        conn.commit()
        conn.close()

    def run_exists(self, run_id: str) -> bool:
        conn = self._connect()
        exists = conn.execute("SELECT 1 FROM runs WHERE run_id = ?", (run_id,)).fetchone() is not None
        conn.close()
        return exists

    def start_run(self, run_id: str, command: str, model_name: str, seed: int) -> int:
        """Create a run record, resetting it if the run id was used before"""
        conn = self._connect()
        cursor = conn.cursor()
        now = datetime.now().isoformat()

        if self.run_exists(run_id):
            cursor.execute("DELETE FROM update_events WHERE run_id = ?", (run_id,))
            cursor.execute("DELETE FROM artifacts WHERE run_id = ?", (run_id,))
            cursor.execute("""
                UPDATE runs
                SET command = ?, model_name = ?, seed = ?, status = ?, summary = NULL,
                    created_at = ?, finished_at = NULL
                WHERE run_id = ?
            """, (command, model_name, seed, "running", now, run_id))
            cursor.execute("SELECT id FROM runs WHERE run_id = ?", (run_id,))
            run_pk = cursor.fetchone()[0]
        else:
            cursor.execute("""
                INSERT INTO runs (run_id, command, model_name, seed, status, created_at)
                VALUES (?, ?, ?, ?, ?, ?)
            """, (run_id, command, model_name, seed, "running", now))
            run_pk = cursor.lastrowid

        conn.commit()
        conn.close()
        return run_pk

    def finish_run(self, run_id: str, status: str, summary: Optional[Dict] = None):
        """Mark a run finished ("done", "failed" or "aborted") with its summary numbers"""
        conn = self._connect()
        conn.execute("""
            UPDATE runs
            SET status = ?, summary = ?, finished_at = ?
            WHERE run_id = ?
        """, (status, json.dumps(summary, default=float) if summary is not None else None,
              datetime.now().isoformat(), run_id))
        conn.commit()
        conn.close()

    def log_update(self, run_id: str, step: int, updater: str, branch: str,
                   applied: bool, reason: str = "", loss: Optional[float] = None,
                   sample: Optional[Dict] = None):
        """Record one updater decision; `sample` holds the training pair as JSON"""
        conn = self._connect()
        conn.execute("""
            INSERT INTO update_events (run_id, step, updater, branch, applied, reason, loss, sample, timestamp)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
        """, (run_id, step, updater, branch, 1 if applied else 0, reason, loss,
              json.dumps(sample) if sample is not None else None, datetime.now().isoformat()))
        conn.commit()
        conn.close()

    def log_artifact(self, run_id: str, kind: str, path: Union[str, Path]):
        conn = self._connect()
        conn.execute("""
            INSERT INTO artifacts (run_id, kind, path, timestamp) VALUES (?, ?, ?, ?)
        """, (run_id, kind, str(path), datetime.now().isoformat()))
        conn.commit()
        conn.close()

    def get_run(self, run_id: str) -> Optional[Dict]:
        conn = self._connect()
        row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
        conn.close()
        if row is None:
            return None
        run = dict(row)
        run["summary"] = json.loads(run["summary"]) if run["summary"] else None
        return run

    def get_run_history(self, run_id: str) -> Dict[str, List[Dict]]:
        """Get the update events and artifacts of a run"""
        conn = self._connect()
        updates = [dict(r) for r in conn.execute(
            "SELECT * FROM update_events WHERE run_id = ? ORDER BY id", (run_id,)).fetchall()]
        for update in updates:
            update["sample"] = json.loads(update["sample"]) if update["sample"] else None
        artifacts = [dict(r) for r in conn.execute(
            "SELECT * FROM artifacts WHERE run_id = ? ORDER BY id", (run_id,)).fetchall()]
        conn.close()
        return {"updates": updates, "artifacts": artifacts}
