"""SQLite ledger of measured profile points so sweeps can resume."""

import sqlite3
import logging
import json
from datetime import datetime, timezone

import config

logger = logging.getLogger(__name__)

_CREATE_TABLE = """
CREATE TABLE IF NOT EXISTS profile_points (
    mode TEXT NOT NULL,
    qubits INTEGER NOT NULL,
    world INTEGER NOT NULL,
    batch INTEGER NOT NULL,
    depth INTEGER NOT NULL,
    seed INTEGER NOT NULL,
    precision TEXT NOT NULL,
    walltime_s REAL,
    a2a_bytes INTEGER,
    records_json TEXT NOT NULL,
    created_at TEXT DEFAULT (datetime('now')),
    PRIMARY KEY (mode, qubits, world, batch, depth, seed, precision)
)
"""

_KEY_SQL = (
    "mode = ? AND qubits = ? AND world = ? AND batch = ? "
    "AND depth = ? AND seed = ? AND precision = ?"
)


def _connect() -> sqlite3.Connection:
    config.DATA_DIR.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(config.DB_PATH)
    conn.execute(_CREATE_TABLE)
    conn.commit()
    return conn


def _key(
    mode: str, qubits: int, world: int, batch: int, depth: int, seed: int, precision: str
) -> tuple:
    return (mode, int(qubits), int(world), int(batch), int(depth), int(seed), precision)


def get_profile_point(
    *,
    mode: str,
    qubits: int,
    world: int,
    batch: int,
    depth: int,
    seed: int,
    precision: str,
) -> list[dict] | None:
    """Stored per-rank records for one sweep point, or None when not measured yet."""
    with _connect() as conn:
        row = conn.execute(
            f"SELECT records_json FROM profile_points WHERE {_KEY_SQL}",
            _key(mode, qubits, world, batch, depth, seed, precision),
        ).fetchone()
    if not row:
        return None
    try:
        return json.loads(str(row[0]))
    except json.JSONDecodeError:
        logger.warning(
            "Registro corrupto para q=%d world=%d; se volverá a medir.", qubits, world
        )
        return None


def save_profile_point(
    *,
    mode: str,
    qubits: int,
    world: int,
    batch: int,
    depth: int,
    seed: int,
    precision: str,
    records: list[dict],
) -> None:
    walltime = max((float(r.get("walltime_s") or 0.0) for r in records), default=0.0)
    a2a_bytes = sum(int(r.get("a2a_bytes") or 0) for r in records)
    with _connect() as conn:
        conn.execute(
            """INSERT OR REPLACE INTO profile_points
               (mode, qubits, world, batch, depth, seed, precision,
                walltime_s, a2a_bytes, records_json, created_at)
               VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)""",
            (
                *_key(mode, qubits, world, batch, depth, seed, precision),
                walltime,
                a2a_bytes,
                json.dumps(records),
                datetime.now(timezone.utc).isoformat(),
            ),
        )
        conn.commit()
    logger.info(
        "Punto de perfil guardado [%s]: q=%d world=%d (%.3fs, %d bytes a2a)",
        mode, qubits, world, walltime, a2a_bytes,
    )


def count_profile_points(mode: str | None = None) -> int:
    sql = "SELECT COUNT(*) FROM profile_points"
    params: list[str] = []
    if mode:
        sql += " WHERE mode = ?"
        params.append(mode)
    with _connect() as conn:
        row = conn.execute(sql, params).fetchone()
    return int(row[0]) if row else 0


def delete_profile_points(mode: str | None = None, world: int | None = None) -> int:
    """Drop stored points (all, or those matching the filters) so the next sweep re-measures them."""
    sql = "DELETE FROM profile_points"
    params: list[object] = []
    where: list[str] = []
    if mode:
        where.append("mode = ?")
        params.append(mode)
    if world:
        where.append("world = ?")
        params.append(world)
    if where:
        sql += " WHERE " + " AND ".join(where)
    with _connect() as conn:
        cur = conn.execute(sql, params)
        conn.commit()
    logger.info("Puntos de perfil eliminados: %d", cur.rowcount)
    return cur.rowcount
