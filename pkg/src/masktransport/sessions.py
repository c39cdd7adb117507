"""Embedded session store for sequential editing.

Sessions live in sqlite (a file or shared in-memory database) with TTL
eviction.  The editing chain is sequential: after step n the step-n output
becomes the step-(n+1) exemplar and the step-n conditional mask becomes its
exemplar mask.  Undo rewinds that chain by one step.

History mutation is serialized per session id via process-local locks; the
store itself is safe to call from multiple threads.
"""

from __future__ import annotations

import sqlite3
import threading
import time
import uuid
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

_SCHEMA = """
CREATE TABLE IF NOT EXISTS sessions (
    id TEXT PRIMARY KEY,
    created REAL NOT NULL,
    updated REAL NOT NULL,
    base_exemplar BLOB NOT NULL,
    base_mask BLOB NOT NULL,
    exemplar BLOB NOT NULL,
    mask BLOB NOT NULL
);
CREATE TABLE IF NOT EXISTS history (
    session_id TEXT NOT NULL,
    idx INTEGER NOT NULL,
    edited_mask BLOB NOT NULL,
    output BLOB NOT NULL,
    created REAL NOT NULL,
    PRIMARY KEY (session_id, idx)
);
"""


class SessionNotFound(KeyError):
    def __init__(self, session_id: str):
        super().__init__(session_id)
        self.session_id = session_id

    def __str__(self):
        return f"no such session: {self.session_id}"


class NothingToUndo(RuntimeError):
    pass


@dataclass
class HistoryStep:
    index: int
    edited_mask: bytes
    output: bytes
    created: float


@dataclass
class SessionView:
    id: str
    created: float
    updated: float
    base_exemplar: bytes
    base_mask: bytes
    exemplar: bytes  # current working exemplar (last output, or base)
    mask: bytes      # current exemplar mask (last edited mask, or base)
    history: List[HistoryStep]


class SessionStore:
    def __init__(self, path=None, *, ttl_seconds: float = 3600.0):
        self._ttl = float(ttl_seconds)
        # a named in-memory database shared across connections in-process
        self._uri = (f"file:{path}?mode=rwc" if path
                     else f"file:mem-{uuid.uuid4().hex}?mode=memory&cache=shared")
        self._keepalive = sqlite3.connect(self._uri, uri=True,
                                          check_same_thread=False)
        with self._connect() as conn:
            conn.executescript(_SCHEMA)
        self._locks: Dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._clock: Callable[[], float] = time.time

    @contextmanager
    def _connect(self):
        conn = sqlite3.connect(self._uri, uri=True, timeout=30.0)
        try:
            yield conn
            conn.commit()
        finally:
            conn.close()

    def lock(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            if session_id not in self._locks:
                self._locks[session_id] = threading.Lock()
            return self._locks[session_id]

    # -- lifecycle ---------------------------------------------------------

    def create(self, exemplar_png: bytes, mask_png: bytes) -> str:
        session_id = uuid.uuid4().hex
        now = self._clock()
        with self._connect() as conn:
            conn.execute(
                "INSERT INTO sessions VALUES (?,?,?,?,?,?,?)",
                (session_id, now, now, exemplar_png, mask_png,
                 exemplar_png, mask_png),
            )
        return session_id

    def get(self, session_id: str) -> SessionView:
        self.evict_expired()
        with self._connect() as conn:
            row = conn.execute(
                "SELECT id, created, updated, base_exemplar, base_mask, "
                "exemplar, mask FROM sessions WHERE id = ?",
                (session_id,),
            ).fetchone()
            if row is None:
                raise SessionNotFound(session_id)
            steps = [
                HistoryStep(index=idx, edited_mask=mask, output=output,
                            created=created)
                for idx, mask, output, created in conn.execute(
                    "SELECT idx, edited_mask, output, created FROM history "
                    "WHERE session_id = ? ORDER BY idx", (session_id,))
            ]
        return SessionView(id=row[0], created=row[1], updated=row[2],
                           base_exemplar=row[3], base_mask=row[4],
                           exemplar=row[5], mask=row[6], history=steps)

    def delete(self, session_id: str) -> None:
        with self._connect() as conn:
            conn.execute("DELETE FROM history WHERE session_id = ?", (session_id,))
            cur = conn.execute("DELETE FROM sessions WHERE id = ?", (session_id,))
            if cur.rowcount == 0:
                raise SessionNotFound(session_id)
        with self._locks_guard:
            self._locks.pop(session_id, None)

    def evict_expired(self) -> int:
        cutoff = self._clock() - self._ttl
        with self._connect() as conn:
            stale = [r[0] for r in conn.execute(
                "SELECT id FROM sessions WHERE updated < ?", (cutoff,))]
            for session_id in stale:
                conn.execute("DELETE FROM history WHERE session_id = ?",
                             (session_id,))
                conn.execute("DELETE FROM sessions WHERE id = ?", (session_id,))
        with self._locks_guard:
            for session_id in stale:
                self._locks.pop(session_id, None)
        return len(stale)

    # -- editing chain -----------------------------------------------------

    def _touch(self, conn, session_id: str) -> None:
        cur = conn.execute("UPDATE sessions SET updated = ? WHERE id = ?",
                           (self._clock(), session_id))
        if cur.rowcount == 0:
            raise SessionNotFound(session_id)

    def set_mask(self, session_id: str, mask_png: bytes) -> None:
        with self._connect() as conn:
            self._touch(conn, session_id)
            conn.execute("UPDATE sessions SET mask = ? WHERE id = ?",
                         (mask_png, session_id))

    def append_step(self, session_id: str, edited_mask_png: bytes,
                    output_png: bytes) -> int:
        """Record one manipulation; promotes its output to the next exemplar."""
        with self._connect() as conn:
            self._touch(conn, session_id)
            (next_idx,) = conn.execute(
                "SELECT COALESCE(MAX(idx) + 1, 0) FROM history "
                "WHERE session_id = ?", (session_id,)).fetchone()
            conn.execute(
                "INSERT INTO history VALUES (?,?,?,?,?)",
                (session_id, next_idx, edited_mask_png, output_png,
                 self._clock()),
            )
            conn.execute(
                "UPDATE sessions SET exemplar = ?, mask = ? WHERE id = ?",
                (output_png, edited_mask_png, session_id),
            )
        return next_idx


    def undo(self, session_id: str) -> SessionView:
        """Drop the newest step; current state reverts to the one before it."""
        with self._connect() as conn:
            self._touch(conn, session_id)
            row = conn.execute(
                "SELECT MAX(idx) FROM history WHERE session_id = ?",
                (session_id,)).fetchone()
            if row[0] is None:
                raise NothingToUndo(f"session {session_id} has no steps")
            conn.execute(
                "DELETE FROM history WHERE session_id = ? AND idx = ?",
                (session_id, row[0]))
            prev = conn.execute(
                "SELECT edited_mask, output FROM history "
                "WHERE session_id = ? ORDER BY idx DESC LIMIT 1",
                (session_id,)).fetchone()
            if prev is not None:
                conn.execute(
                    "UPDATE sessions SET exemplar = ?, mask = ? WHERE id = ?",
                    (prev[1], prev[0], session_id))
            else:
                conn.execute(
                    "UPDATE sessions SET exemplar = base_exemplar, "
                    "mask = base_mask WHERE id = ?", (session_id,))
        return self.get(session_id)

    def list_ids(self) -> List[str]:
        with self._connect() as conn:
            return [r[0] for r in conn.execute("SELECT id FROM sessions")]


def replay_history(view: SessionView,
                   step_fn: Callable[[bytes, bytes, bytes], bytes]) -> Optional[bytes]:
    """Re-run a session's chain from its base state.

    `step_fn(exemplar_png, exemplar_mask_png, edited_mask_png)` must return
    the output PNG.  Returns the final replayed output (None for an empty
    history); a deterministic model makes it bitwise-equal to the stored one.
    """
    exemplar, mask = view.base_exemplar, view.base_mask
    output = None
    for step in view.history:
        output = step_fn(exemplar, mask, step.edited_mask)
        exemplar, mask = output, step.edited_mask
    return output
