from __future__ import annotations

import itertools
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Tuple

from .models import MS_PER_HOUR, ClientUnavailable, Ticket, TicketStatus


class TicketClient(Protocol):
    """Port to a repair-ticket system; create is idempotent on the key."""

    def create(self, idempotency_key: str, node_id: str, diagnostics: Dict[str, Any], t_ms: int) -> str:
        ...

    def poll(self, ticket_id: str, t_ms: int) -> TicketStatus:
        ...

    def close(self, ticket_id: str, t_ms: int) -> None:
        ...


class FileJournalTicketClient:
    """Mock ticket system backed by an append-only JSONL journal.

    Status moves forward on a simulated schedule: the host is deallocated
    ``deallocate_after_h`` after creation and migrated ``migrate_after_h`` after it.
    Without a journal path the client keeps its state in memory only.
    """

    def __init__(
        self,
        journal_path: Optional[str] = None,
        deallocate_after_h: float = 0.5,
        migrate_after_h: float = 4.0,
    ):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.journal_path = Path(journal_path) if journal_path else None
        self.deallocate_after_ms = int(round(deallocate_after_h * MS_PER_HOUR))
        self.migrate_after_ms = int(round(migrate_after_h * MS_PER_HOUR))
        self.tickets: Dict[str, Ticket] = {}
        self._by_key: Dict[str, str] = {}
        self._created_ms: Dict[str, int] = {}
        self._ids = itertools.count(1)
        self._failures_left = 0
        self.calls: List[Tuple[str, int]] = []
        if self.journal_path is not None:
            self.journal_path.parent.mkdir(parents=True, exist_ok=True)
            self._replay()

    # -- fault injection for tests and drills ---------------------------

    def fail_next(self, count: int) -> None:
        self._failures_left = max(0, int(count))

    def _maybe_fail(self, operation: str, t_ms: int) -> None:
        self.calls.append((operation, int(t_ms)))
        if self._failures_left > 0:
            self._failures_left -= 1
            raise ClientUnavailable(f"ticket service unavailable during {operation}")

    # -- journal ---------------------------------------------------------

    def _append(self, record: Dict[str, Any]) -> None:
        if self.journal_path is None:
            return
        try:
            with self.journal_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
        except OSError as exc:
            raise ClientUnavailable(f"cannot write ticket journal: {exc}") from exc

    def _replay(self) -> None:
        if self.journal_path is None or not self.journal_path.exists():
            return
        with self.journal_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    self.logger.warning("Skipping corrupt journal line: %s", line[:80])
                    continue
                self._apply(record)
        if self.tickets:
            self._ids = itertools.count(len(self.tickets) + 1)
            self.logger.info("Replayed %d tickets from %s", len(self.tickets), self.journal_path)

    def _apply(self, record: Dict[str, Any]) -> None:
        ticket_id = record["ticket_id"]
        if record["op"] == "create":
            ticket = Ticket(ticket_id, record["node_id"], record["key"], record.get("diagnostics", {}))
            ticket.timestamps[TicketStatus.OPEN.value] = int(record["t_ms"])
            self.tickets[ticket_id] = ticket
            self._by_key[record["key"]] = ticket_id
            self._created_ms[ticket_id] = int(record["t_ms"])
        elif ticket_id in self.tickets:
            self.tickets[ticket_id].advance_to(TicketStatus(record["status"]), int(record["t_ms"]))

    # -- port ------------------------------------------------------------

    def create(self, idempotency_key: str, node_id: str, diagnostics: Dict[str, Any], t_ms: int) -> str:
        self._maybe_fail("create", t_ms)
        existing = self._by_key.get(idempotency_key)
        if existing is not None:
            self.logger.info("Ticket for %s already exists: %s", idempotency_key, existing)
            return existing
        ticket_id = f"TKT-{next(self._ids):05d}"
        record = {
            "op": "create",
            "ticket_id": ticket_id,
            "key": idempotency_key,
            "node_id": node_id,
            "diagnostics": diagnostics,
            "t_ms": int(t_ms),
        }
        self._append(record)
        self._apply(record)
        self.logger.info("Created ticket %s for node %s", ticket_id, node_id)
        return ticket_id

    def poll(self, ticket_id: str, t_ms: int) -> TicketStatus:
        self._maybe_fail("poll", t_ms)
        ticket = self.tickets.get(ticket_id)
        if ticket is None:
            raise ClientUnavailable(f"unknown ticket {ticket_id}")
        created = self._created_ms[ticket_id]
        schedule = (
            (TicketStatus.HOST_DEALLOCATED, created + self.deallocate_after_ms),
            (TicketStatus.MIGRATED, created + self.deallocate_after_ms + self.migrate_after_ms),
        )
        for status, due in schedule:
            if t_ms >= due and ticket.advance_to(status, due):
                self._append({"op": "status", "ticket_id": ticket_id, "status": status.value, "t_ms": due})
        return ticket.status

    def close(self, ticket_id: str, t_ms: int) -> None:
        ticket = self.tickets.get(ticket_id)
        if ticket is not None and ticket.advance_to(TicketStatus.CLOSED, int(t_ms)):
            self._append({"op": "status", "ticket_id": ticket_id, "status": TicketStatus.CLOSED.value, "t_ms": int(t_ms)})

    def open_tickets(self) -> List[Ticket]:
        return [t for t in self.tickets.values() if t.status != TicketStatus.CLOSED]
