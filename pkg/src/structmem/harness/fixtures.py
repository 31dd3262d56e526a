"""Generators for the bundled LoCoMo-format fixtures.

``small_conversation`` is a two-session dialogue with a handful of questions
in every category. ``uniform_conversation`` is a 100-turn dialogue whose
utterances all have the same whitespace token count and mention exactly two
capitalized names (the other speaker and a fresh place name), so per-turn
costs under the mock provider depend only on memory growth. Its session
times are spaced so that some sessions fall inside the one-hour window and
others do not.

Run ``python -m structmem.harness.fixtures <dir>`` to regenerate the JSON files.
"""

from __future__ import annotations

import itertools
import json
import sys
from pathlib import Path

SMALL_SESSIONS = (
    ("1:56 pm on 8 May, 2023", [
        ("Alice", "Hi Bob! I finally adopted a puppy last weekend, a beagle named Biscuit."),
        ("Bob", "That is wonderful news. How is Biscuit settling in at your apartment?"),
        ("Alice", "He chewed one of my running shoes, but he sleeps in his crate now."),
        ("Bob", "I started pottery classes at the community center on Tuesdays."),
        ("Alice", "Pottery sounds relaxing. What did you make first?"),
        ("Bob", "A lopsided blue bowl that I gave to my sister Carol."),
        ("Alice", "I am training for the Portland half marathon in September."),
        ("Bob", "Do you run with Biscuit in the mornings?"),
        ("Alice", "Not yet, the vet said to wait until he is six months old."),
        ("Bob", "Good luck with the training, let me know how it goes."),
    ]),
    ("7:10 pm on 20 May, 2023", [
        ("Bob", "Hey Alice, the pottery teacher asked me to show my vases at a fair."),
        ("Alice", "Congratulations! Which fair will display your vases?"),
        ("Bob", "The Riverside craft fair on the third of June."),
        ("Alice", "Biscuit learned to sit and shake this week."),
        ("Bob", "Did you take him to obedience classes?"),
        ("Alice", "Yes, every Saturday morning at Happy Paws."),
        ("Bob", "Carol loved the bowl and now wants a matching mug."),
        ("Alice", "My long run reached fourteen kilometers along the river."),
        ("Bob", "That is great progress toward the half marathon."),
        ("Alice", "I will bring Biscuit to the Riverside fair to see your vases."),
    ]),
)

SMALL_QA = (
    {"question": "What breed is Alice's puppy?", "answer": "beagle", "category": 4,
     "evidence": ["D1:1"]},
    {"question": "What is the name of Alice's puppy?", "answer": "Biscuit", "category": 4,
     "evidence": ["D1:1"]},
    {"question": "Which day of the week are Bob's pottery classes?", "answer": "Tuesdays", "category": 4,
     "evidence": ["D1:4"]},
    {"question": "Who received Bob's blue bowl?", "answer": "Carol", "category": 4,
     "evidence": ["D1:6"]},
    {"question": "Where does Biscuit attend obedience classes?", "answer": "Happy Paws", "category": 4,
     "evidence": ["D2:6"]},
    {"question": "Which race is Alice training for and what did she learn from the vet about Biscuit?",
     "answer": "Portland half marathon", "category": 1, "evidence": ["D1:7", "D1:9"]},
    {"question": "What did Bob make for Carol before she asked for a mug?", "answer": "bowl",
     "category": 1, "evidence": ["D1:6", "D2:7"]},
    {"question": "When did Alice adopt her puppy?", "answer": "May 2023", "category": 2,
     "evidence": ["D1:1"]},
    {"question": "When is the Riverside craft fair?", "answer": "third of June", "category": 2,
     "evidence": ["D2:3"]},
    {"question": "Would Alice likely enjoy outdoor activities with her dog?", "answer": "yes",
     "category": 3, "evidence": ["D1:8"]},
    {"question": "What did Alice name her kitten?", "adversarial_answer": "Biscuit", "category": 5,
     "evidence": ["D1:1"]},
)

# (day, hour, minute) of each uniform-fixture session, all in May 2023
UNIFORM_SESSION_TIMES = (
    (1, 10, 0), (1, 10, 30), (1, 11, 30), (1, 12, 0), (1, 18, 0),
    (2, 9, 0), (2, 9, 20), (2, 9, 40), (5, 8, 0), (5, 8, 59),
)
_SYLLABLES = ("ka", "lo", "mi", "nu", "re", "si", "tu", "ve", "xo", "zy")
_MONTHS = ("January", "February", "March", "April", "May", "June", "July", "August",
           "September", "October", "November", "December")


def _locomo_time(day: int, hour: int, minute: int, month: int = 5, year: int = 2023) -> str:
    suffix = "am" if hour < 12 else "pm"
    h12 = hour % 12 or 12
    return f"{h12}:{minute:02d} {suffix} on {day} {_MONTHS[month - 1]}, {year}"


def place_names(n: int) -> list[str]:
    """``n`` distinct capitalized single-word names."""
    names = ["".join(p).capitalize() for p in itertools.product(_SYLLABLES, repeat=2)]
    names += ["".join(p).capitalize() for p in itertools.product(_SYLLABLES, repeat=3)]
    if n > len(names):
        raise ValueError(f"at most {len(names)} names available")
    return names[:n]


def _build_sample(sample_id: str, speakers: tuple[str, str], sessions, qa) -> dict:
    body: dict = {"speaker_a": speakers[0], "speaker_b": speakers[1]}
    for s, (when, turns) in enumerate(sessions, start=1):
        body[f"session_{s}_date_time"] = when
        body[f"session_{s}"] = [
            {"speaker": spk, "dia_id": f"D{s}:{t}", "text": text}
            for t, (spk, text) in enumerate(turns, start=1)
        ]
    return {"sample_id": sample_id, "conversation": body, "qa": list(qa)}


def small_conversation() -> dict:
    return _build_sample("synthetic-small", ("Alice", "Bob"), SMALL_SESSIONS, SMALL_QA)


def uniform_utterance(speaker: str, other: str, place: str) -> str:
    return f"{other}, the {place} trip went well and i enjoyed it a lot today."


def uniform_conversation(turns_per_session: int = 10) -> dict:
    speakers = ("Alice", "Bob")
    n = turns_per_session * len(UNIFORM_SESSION_TIMES)
    places = iter(place_names(n))
    sessions = []
    for day, hour, minute in UNIFORM_SESSION_TIMES:
        turns = []
        for t in range(turns_per_session):
            speaker, other = (speakers[t % 2], speakers[1 - t % 2])
            turns.append((speaker, uniform_utterance(speaker, other, next(places))))
        sessions.append((_locomo_time(day, hour, minute), turns))
    all_places = place_names(n)
    qa = [
        {"question": f"Who did {speakers[i % 2]} tell about the {all_places[i]} trip?",
         "answer": speakers[1 - i % 2], "category": (4, 1, 2, 3)[(i // 10) % 4],
         "evidence": [f"D{i // turns_per_session + 1}:{i % turns_per_session + 1}"]}
        for i in range(0, n, 10)
    ]
    return _build_sample("synthetic-uniform", speakers, sessions, qa)


def write_fixtures(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name, sample in (("synthetic_small.json", small_conversation()),
                         ("synthetic_100.json", uniform_conversation())):
        path = directory / name
        path.write_text(json.dumps([sample], indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
        out.append(path)
    return out


if __name__ == "__main__":
    for p in write_fixtures(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent.parent / "data"):
        print(p)
