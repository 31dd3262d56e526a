from __future__ import annotations

import json
import os
from collections import Counter

import pytest

from structmem.errors import DatasetParseError
from structmem.harness.dataset import load_dataset, parse_conversation, parse_session_datetime
from structmem.harness.fixtures import small_conversation, uniform_conversation, write_fixtures


def test_session_datetime_formats():
    assert parse_session_datetime("1:56 pm on 8 May, 2023") == "2023-05-08T13:56:00Z"
    assert parse_session_datetime("12:05 am on 1 January, 2024") == "2024-01-01T00:05:00Z"


def test_small_fixture_counts():
    conv, = load_dataset("synthetic_small")
    assert conv.conversation_id == "synthetic-small"
    assert len(conv.utterances()) == 20 and len(conv.sessions) == 2
    assert len(conv.qa_items) == 10
    assert conv.skipped_qa == Counter({"5": 1})
    assert conv.type_counts() == Counter(single_hop=5, multi_hop=2, temporal=2, open_domain=1)
    u = conv.utterances()[0]
    assert (u.speaker, u.timestamp) == ("Alice", "2023-05-08T13:56:00Z")


def test_uniform_fixture_shape():
    conv, = load_dataset("synthetic_100")
    assert len(conv.utterances()) == 100
    assert set(conv.type_counts()) == {"single_hop", "multi_hop", "temporal", "open_domain"}


def test_bundled_json_matches_generator(tmp_path):
    written = {p.name: json.loads(p.read_text()) for p in write_fixtures(tmp_path)}
    assert written["synthetic_small.json"] == [small_conversation()]
    assert written["synthetic_100.json"] == [uniform_conversation()]
    for name in ("synthetic_small", "synthetic_100"):
        bundled = load_dataset(name)
        fresh = load_dataset(tmp_path / f"{name}.json")
        assert bundled[0].qa_items == fresh[0].qa_items
        assert bundled[0].utterances() == fresh[0].utterances()


def test_image_caption_appended():
    sample = small_conversation()
    sample["conversation"]["session_1"][0]["blip_caption"] = "a beagle on a rug"
    conv = parse_conversation(sample)
    assert conv.utterances()[0].text.endswith("[shares an image: a beagle on a rug]")


def test_malformed_datetime_names_session():
    sample = small_conversation()
    sample["conversation"]["session_2_date_time"] = "sometime in spring"
    with pytest.raises(DatasetParseError, match="session_2"):
        parse_conversation(sample)


def test_unknown_speaker_and_time_order():
    sample = small_conversation()
    sample["conversation"]["session_1"][3]["speaker"] = "Mallory"
    with pytest.raises(DatasetParseError, match="Mallory"):
        parse_conversation(sample)
    sample = small_conversation()
    sample["conversation"]["session_2_date_time"] = "1:00 pm on 1 May, 2023"
    with pytest.raises(DatasetParseError, match="session_2"):
        parse_conversation(sample)


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(DatasetParseError):
        load_dataset(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("[{")
    with pytest.raises(DatasetParseError, match="line 1"):
        load_dataset(bad)


def test_unknown_category_is_counted_as_skipped():
    sample = small_conversation()
    sample["qa"].append({"question": "q", "answer": "a", "category": 9})
    conv = parse_conversation(sample)
    assert conv.skipped_qa == Counter({"5": 1, "9": 1}) and len(conv.qa_items) == 10


@pytest.mark.skipif(not os.environ.get("LOCOMO_PATH"), reason="set LOCOMO_PATH to the LoCoMo JSON file")
def test_full_locomo_question_counts():
    convs = load_dataset(os.environ["LOCOMO_PATH"])
    total = sum((c.type_counts() for c in convs), Counter())
    assert len(convs) == 10
    assert total == Counter(single_hop=841, multi_hop=282, temporal=321, open_domain=96)
