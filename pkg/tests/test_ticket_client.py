from __future__ import annotations

import pytest

from fleet_guardian.models import MS_PER_HOUR, ClientUnavailable, TicketStatus
from fleet_guardian.ticket_client import FileJournalTicketClient


def test_create_is_idempotent_on_key():
    client = FileJournalTicketClient()
    first = client.create("node-001@0", "node-001", {"fault_class": "interconnect"}, 0)
    again = client.create("node-001@0", "node-001", {}, 10)
    other = client.create("node-001@500", "node-001", {}, 500)
    assert first == again == "TKT-00001"
    assert other == "TKT-00002"
    assert len(client.open_tickets()) == 2


def test_status_follows_simulated_schedule():
    client = FileJournalTicketClient(deallocate_after_h=0.5, migrate_after_h=4.0)
    ticket_id = client.create("k", "node-002", {}, 0)
    assert client.poll(ticket_id, int(0.4 * MS_PER_HOUR)) == TicketStatus.OPEN
    assert client.poll(ticket_id, int(0.5 * MS_PER_HOUR)) == TicketStatus.HOST_DEALLOCATED
    assert client.poll(ticket_id, int(10 * MS_PER_HOUR)) == TicketStatus.MIGRATED
    ticket = client.tickets[ticket_id]
    # transitions are stamped at their due time, not at the poll time
    assert ticket.timestamps[TicketStatus.MIGRATED.value] == int(4.5 * MS_PER_HOUR)
    client.close(ticket_id, int(11 * MS_PER_HOUR))
    assert client.open_tickets() == []
    assert client.poll(ticket_id, int(12 * MS_PER_HOUR)) == TicketStatus.CLOSED


def test_journal_replay_restores_state(tmp_path):
    journal = tmp_path / "tickets" / "journal.jsonl"
    client = FileJournalTicketClient(str(journal))
    ticket_id = client.create("node-003@7", "node-003", {"incidents": ["i-1"]}, 7)
    client.poll(ticket_id, int(1 * MS_PER_HOUR))

    with journal.open("a", encoding="utf-8") as fh:
        fh.write("{not json\n")

    restored = FileJournalTicketClient(str(journal))
    assert restored.tickets[ticket_id].status == TicketStatus.HOST_DEALLOCATED
    assert restored.tickets[ticket_id].diagnostics == {"incidents": ["i-1"]}
    assert restored.create("node-003@7", "node-003", {}, 99) == ticket_id
    assert restored.create("node-004@9", "node-004", {}, 99) == "TKT-00002"


def test_injected_failures_and_unknown_tickets():
    client = FileJournalTicketClient()
    client.fail_next(2)
    for _ in range(2):
        with pytest.raises(ClientUnavailable):
            client.create("k", "node-000", {}, 0)
    assert client.create("k", "node-000", {}, 0) == "TKT-00001"
    assert client.calls == [("create", 0)] * 3
    with pytest.raises(ClientUnavailable):
        client.poll("TKT-99999", 0)
