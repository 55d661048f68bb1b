"""Random EventInstance generators and single-rule mutators for property tests."""

from __future__ import annotations

import copy
import random
from typing import Any

from aee.codebook import ArgumentField, Codebook, EventInstance

ENTITY_POOL = [f"ent-{i:03d}" for i in range(12)]
TEXT_POOL = ["small", "hundreds", "about 2000", "thousands", "Large", "dozens"]
LOCATIONS = [
    {"country": "Iraq", "address": "Mosul, Nineveh, Iraq"},
    {"country": "Iraq", "address": "Baghdad, Iraq"},
    {"country": "Pakistan", "address": "Mand Tehsil, Kech District, Balochistan, Pakistan"},
    {"country": "India", "address": "Chaskhand, Jajpur, Odisha, India"},
    {"country": "Mexico", "address": ""},
]


def random_value(f: ArgumentField, rng: random.Random, null_prob: float = 0.2) -> Any:
    if f.nullable and rng.random() < null_prob:
        return None
    kind = f.domain.kind
    if kind == "boolean":
        return rng.random() < 0.5
    if kind == "integer":
        return rng.choice([0, 0, 1, 2, 3, 5, 12, 100])
    if kind == "text":
        return rng.choice(TEXT_POOL)
    if kind == "categorical":
        return rng.choice(f.domain.options)
    if kind == "categorical_set":
        return rng.sample(list(f.domain.options), rng.randint(0, min(3, len(f.domain.options))))
    if kind == "entity_set":
        return rng.sample(ENTITY_POOL, rng.randint(0, 3))
    return dict(rng.choice(LOCATIONS))


def random_instance(cb: Codebook, rng: random.Random, event_type: str | None = None, null_prob: float = 0.2) -> EventInstance:
    t = event_type or rng.choice(cb.type_names)
    sig = cb.signature(t)
    return EventInstance(t, {f.name: random_value(f, rng, null_prob) for f in sig.fields})


def _bad_values(f: ArgumentField) -> list[Any]:
    """Values violating exactly the domain rule of ``f``; floats are kept separate."""
    kind = f.domain.kind
    bad: list[Any] = [] if f.nullable else [None]
    if kind == "boolean":
        bad += ["true", 1, 0, [True]]
    elif kind == "integer":
        bad += [-1, -7, "3", "three", True, [1]]
    elif kind == "text":
        bad += [3, True, ["small"], {"t": 1}]
    elif kind == "categorical":
        bad += ["NOT_A_LABEL", 1]
    elif kind == "categorical_set":
        opt = f.domain.options[0]
        bad += ["GIRLS", ["NOT_A_LABEL"], [opt, opt], [1], {"x": 1}]
    elif kind == "entity_set":
        bad += ["ent-000", ["ent-000", "ent-000"], [1, 2], [None], {"ent": 1}]
    else:
        bad += [
            "Iraq",
            {"country": "Iraq"},
            {"address": "Mosul"},
            {"country": "Iraq", "address": "Mosul", "city": "Mosul"},
            {"country": "", "address": "Mosul"},
            {"country": "   ", "address": "Mosul"},
            {"country": "Iraq", "address": 5},
            ["Iraq", "Mosul"],
        ]
    return bad


def mutate(cb: Codebook, ev: EventInstance, rng: random.Random, *, allow_type: bool = True) -> tuple[EventInstance, str]:
    """Break exactly one rule of a valid instance. Returns (mutant, description)."""
    sig = cb.signature(ev.event_type)
    args = copy.deepcopy(ev.arguments)
    choices = ["value"] * 6 + ["extra_role"]
    required = [f for f in sig.fields if not f.nullable]
    if required:
        choices.append("drop_required")
    if allow_type:
        choices.append("unknown_type")
    what = rng.choice(choices)
    if what == "unknown_type":
        return EventInstance(rng.choice(["Sports", "Battle", "mobviolence", ""]), args), "unknown_type"
    if what == "extra_role":
        args[rng.choice(["zz_notes", "zz_extra_role"])] = None
        return EventInstance(ev.event_type, args), "extra_role"
    if what == "drop_required":
        f = rng.choice(required)
        del args[f.name]
        return EventInstance(ev.event_type, args), f"drop:{f.name}"
    f = rng.choice(sig.fields)
    args[f.name] = copy.deepcopy(rng.choice(_bad_values(f)))
    return EventInstance(ev.event_type, args), f"value:{f.name}"


def perturb(cb: Codebook, gold: EventInstance, rng: random.Random) -> EventInstance | None:
    """A plausible prediction for ``gold``: exact, partly wrong, wrong type, or missing."""
    roll = rng.random()
    if roll < 0.1:
        return None
    if roll < 0.3:
        t = rng.choice([x for x in cb.type_names if x != gold.event_type])
        return random_instance(cb, rng, t)
    args = copy.deepcopy(gold.arguments)
    sig = cb.signature(gold.event_type)
    for f in sig.fields:
        r = rng.random()
        if r < 0.25:
            args[f.name] = random_value(f, rng)
        elif r < 0.35 and f.domain.kind in ("entity_set", "categorical_set") and args[f.name]:
            args[f.name] = list(reversed(args[f.name]))
    return EventInstance(gold.event_type, args)


def random_scoring_corpus(cb: Codebook, rng: random.Random, n_docs: int | None = None):
    from aee.corpus import Document, GoldRecord

    n = n_docs if n_docs is not None else rng.randint(1, 12)
    langs = ["en", "es", "ar", "fr"]
    golds = [
        GoldRecord(
            Document(f"d{i}", rng.choice(langs), "X", "text", rng.choice(["train", "dev", "test"])),
            random_instance(cb, rng),
        )
        for i in range(n)
    ]
    preds = {}
    for g in golds:
        p = perturb(cb, g.gold, rng)
        if p is not None or rng.random() < 0.5:
            preds[g.doc_id] = p
    return golds, preds
