"""CLI to inspect or prune stored profile points from SQLite."""

from __future__ import annotations

import argparse
import json
import sqlite3
from datetime import datetime

import config
import state


def _format_dt(value: str) -> str:
    raw = (value or "").strip()
    if not raw:
        return "-"
    try:
        dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
        return dt.isoformat(timespec="seconds")
    except Exception:
        return raw


def _load_rows(limit: int, mode: str | None, world: int | None) -> list[sqlite3.Row]:
    if not config.DB_PATH.exists():
        return []
    conn = sqlite3.connect(config.DB_PATH)
    conn.row_factory = sqlite3.Row
    sql = """
        SELECT mode, qubits, world, batch, depth, seed, precision,
               walltime_s, a2a_bytes, created_at
        FROM profile_points
    """
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
    sql += " ORDER BY mode, qubits, world LIMIT ?"
    params.append(limit)
    try:
        rows = conn.execute(sql, params).fetchall()
    except sqlite3.OperationalError:
        rows = []
    conn.close()
    return rows


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="Show stored profile points")
    parser.add_argument("--limit", type=int, default=50, help="Max rows to display")
    parser.add_argument("--mode", default="", choices=["", "strong", "weak"], help="Filter by sweep mode")
    parser.add_argument("--world", type=int, default=0, help="Filter by world size")
    parser.add_argument("--json", action="store_true", help="Print as JSON")
    parser.add_argument("--delete", action="store_true", help="Delete the matching points instead of listing them")
    args = parser.parse_args(argv)

    if args.delete:
        removed = state.delete_profile_points(mode=args.mode or None, world=args.world or None)
        print(f"Puntos eliminados: {removed}")
        return

    rows = _load_rows(
        limit=max(args.limit, 1),
        mode=args.mode or None,
        world=args.world or None,
    )

    if args.json:
        payload = [dict(row) for row in rows]
        print(json.dumps(payload, ensure_ascii=False, indent=2))
        return

    if not rows:
        print("No hay puntos de perfil para los filtros indicados.")
        return

    print("created_at | mode | qubits | world | batch | depth | precision | walltime_s | a2a_bytes")
    print("-" * 100)
    for row in rows:
        line = (
            f"{_format_dt(str(row['created_at']))} | "
            f"{row['mode']} | "
            f"{row['qubits']} | "
            f"{row['world']} | "
            f"{row['batch']} | "
            f"{row['depth']} | "
            f"{row['precision']} | "
            f"{row['walltime_s']:.4f} | "
            f"{row['a2a_bytes']}"
        )
        print(line)


if __name__ == "__main__":
    main()
