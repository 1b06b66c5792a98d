from __future__ import annotations

import json

import pytest

from fleet_guardian.knowledge_base import KnowledgeBase, read_corpus
from fleet_guardian.models import IncidentLabel, SchemaError
from fleet_guardian.replay import replay_bundle, window_schema, write_case_bundles


@pytest.fixture
def bundles(tmp_path):
    write_case_bundles(str(tmp_path / "bundles"), seed=0)
    return tmp_path / "bundles"


def test_case_bundles_layout(bundles):
    corpus = read_corpus(str(bundles / "case1" / "corpus"))
    labels = [i.label for i in corpus]
    assert labels.count(IncidentLabel.HARDWARE_FAULT) == 4
    assert labels.count(IncidentLabel.USER_ERROR) == 3
    assert labels.count(IncidentLabel.HEALTHY) == 4
    assert (bundles / "case1" / "C1-HW-FOCAL" / "manifest.yaml").exists()
    assert (bundles / "case2" / "C2-NAN-01" / "telemetry.csv").exists()


def test_replay_of_loss_nan_bundle_names_first_node(bundles, tmp_path):
    result = replay_bundle(str(bundles / "case2" / "C2-NAN-01"), str(tmp_path / "out"))
    assert result.session.status == "Confirmed"
    assert result.session.confirmed_node == "node-003"
    assert result.candidate is None
    report = json.loads((tmp_path / "out" / "diagnosis.json").read_text(encoding="utf-8"))
    assert report["confirmed_node"] == "node-003"


def test_replay_with_corpus_learns_a_rule(bundles, tmp_path):
    out = tmp_path / "out"
    result = replay_bundle(
        str(bundles / "case1" / "C1-HW-FOCAL"),
        str(out),
        corpus_dir=str(bundles / "case1" / "corpus"),
    )
    assert result.candidate is not None
    assert result.candidate.accepted
    generation = json.loads((out / "generation.json").read_text(encoding="utf-8"))
    assert generation["accepted"] is True
    kb = KnowledgeBase(str(out / "kb"))
    assert kb.rule_ids() == [result.candidate.rule.rule_id]
    result.candidate.rule.compiled.check_schema(window_schema(result.incident.window))


def test_replay_of_user_error_skips_generation(bundles, tmp_path):
    corpus_dir = bundles / "case1" / "corpus"
    result = replay_bundle(str(corpus_dir / "C1-USER-01"), str(tmp_path / "out"), corpus_dir=str(corpus_dir))
    assert result.candidate is None
    assert not (tmp_path / "out" / "generation.json").exists()


def test_replay_of_missing_bundle(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(SchemaError):
        replay_bundle(str(tmp_path / "empty"), str(tmp_path / "out"))
