"""Deterministic templated dialogue-turn corpus for desk-scale experiments.

72 templates across hotel / restaurant / taxi / train / general domains. Each
template carries an early anchor slot and one or two late association slots
whose values are a fixed function of (template, anchor value). The association
table (~900 cells, each appearing only a couple of times in a 2k-sentence
train set) is too thin to memorize in-weights but is recoverable by retrieving
training sentences that share the anchor, which is what gives suffix retrieval
something real to contribute. Train and validation are disjoint unique
sentences over the same pools; a coverage sweep guarantees every association
cell appears in train.

Slot syntax: ``{POOL}`` free slot, ``{POOL2}`` free slot distinct from
``{POOL}``, ``{A:POOL}`` anchor, ``{1:POOL}``/``{2:POOL}`` association slots,
``{H}``/``{R}`` two-token entity names acting as anchors.
"""

from __future__ import annotations

import re
import zlib

import numpy as np

HOTEL_FIRST = [
    "golden", "royal", "grand", "silver", "emerald", "sunny", "quiet", "ancient",
    "modern", "coastal", "garden", "harbor", "maple", "cedar", "willow", "crystal",
]
HOTEL_SECOND = ["palace", "lodge", "arms", "inn", "manor", "towers", "court", "villa"]
REST_FIRST = [
    "jade", "copper", "olive", "saffron", "pepper", "honey", "ginger", "lotus",
    "bamboo", "truffle", "barrel", "ember", "clover", "juniper", "marble", "velvet",
]
REST_SECOND = ["kitchen", "bistro", "grill", "table", "house", "cellar", "corner", "terrace"]

POOLS: dict[str, list[str]] = {
    "AREA": ["north", "south", "east", "west", "centre", "riverside", "airport", "downtown"],
    "DAY": ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"],
    "NUM": ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"],
    "FOOD": [
        "italian", "chinese", "indian", "thai", "mexican", "french",
        "japanese", "korean", "turkish", "greek", "spanish", "lebanese",
    ],
    "TIME": ["morning", "noon", "afternoon", "evening", "night", "midnight", "dawn", "dusk"],
    "PRICE": ["cheap", "moderate", "expensive"],
    "STATION": [
        "parkside", "oakfield", "elmwood", "northgate",
        "southbridge", "eastham", "westfall", "midtown",
    ],
    "DOMAIN": ["hotel", "restaurant", "taxi", "train"],
}

TEMPLATES = [
    # hotel (anchor = entity)
    "the {H} hotel in the {1:AREA} area is {NUM} minutes from {2:STATION} station",
    "the {H} hotel offers breakfast every {DAY} at {1:TIME}",
    "the {H} hotel charges {NUM} pounds with {1:PRICE} weekend rates",
    "at the {H} hotel check in starts at {1:TIME} on {DAY}",
    "the {H} hotel can host {NUM} guests in its {1:NUM} rooms",
    "does the {H} hotel in {1:AREA} allow pets on {DAY}",
    "the {H} hotel shuttle leaves for {1:STATION} station every {TIME}",
    "my room at the {H} hotel is booked from {DAY} until {1:DAY}",
    "the {H} hotel gym is open from {1:TIME} until {TIME}",
    "is the {H} hotel near the {1:STATION} station in {2:AREA} or {AREA}",
    "the {H} hotel lounge serves {1:FOOD} snacks on {DAY} evenings",
    "book the {H} hotel for {NUM} people arriving {DAY} {1:TIME}",
    "the {H} hotel front desk closes at {1:TIME} every {DAY}",
    "cancel my {H} hotel booking for {DAY} and {1:DAY} please",
    "the {H} hotel parking lot fits {1:NUM} cars for {NUM} pounds",
    "i left my bag at the {H} hotel in room {NUM} on {1:DAY}",
    "the {H} hotel wifi password changes every {1:DAY} at {2:TIME}",
    "how far is the {H} hotel from {1:STATION} station on a {DAY}",
    # restaurant (anchor = entity)
    "the {R} restaurant serves {1:FOOD} food in the {2:AREA} area near {STATION}",
    "the {R} restaurant opens at {1:TIME} on {DAY}",
    "book a table at the {R} restaurant for {NUM} people at {1:TIME}",
    "the {R} restaurant is famous for {1:FOOD} dishes at {2:PRICE} prices",
    "does the {R} restaurant take bookings for {DAY} {1:TIME}",
    "the {R} restaurant in {1:AREA} seats {2:NUM} guests after {TIME}",
    "my table at the {R} restaurant is set for {NUM} at {1:TIME}",
    "the {R} restaurant kitchen closes at {1:TIME} except {2:DAY}",
    "order takeaway from the {R} restaurant before {1:TIME} on {DAY}",
    "the {R} restaurant requires deposits for parties over {1:NUM} on {DAY}",
    "is the {R} restaurant open this {DAY} at {1:TIME}",
    "the {R} restaurant waiter recommended the {1:FOOD} special for {NUM}",
    "cancel my {R} restaurant reservation for {DAY} {1:TIME}",
    "the {R} restaurant hosts live music every {1:DAY} {2:TIME}",
    "find the {R} restaurant near {1:STATION} station in {2:AREA} by {TIME}",
    "the {R} restaurant lunch deal costs {1:NUM} pounds until {TIME}",
    "does the {R} restaurant serve {1:FOOD} food after {TIME}",
    "the {R} restaurant dress code applies after {1:TIME} on {DAY}",
    # taxi
    "a taxi from {A:STATION} station to the {AREA} area costs {1:NUM} pounds",
    "book a taxi for {A:NUM} passengers on {DAY} at {1:TIME}",
    "the taxi to {A:STATION} station leaves at {1:TIME} sharp",
    "a {A:PRICE} taxi to the {AREA} area takes {1:NUM} minutes",
    "your taxi arrives at {A:TIME} near the {1:STATION} station entrance",
    "the taxi meter starts at {A:NUM} pounds after {1:TIME}",
    "send a taxi to {A:AREA} by {TIME} on {1:DAY}",
    "the {A:AREA} taxi rank closes at {1:TIME} on {2:DAY}",
    "i need a taxi on {A:DAY} {TIME} to {1:STATION} station",
    "the taxi firm in {A:AREA} charges {1:NUM} pounds per mile",
    "cancel the taxi booked for {A:DAY} at {1:TIME} please",
    "a shared taxi from {A:STATION} station runs every {1:NUM} minutes",
    # train
    "the train to {A:STATION} leaves from platform {1:NUM} at {2:TIME}",
    "a ticket to {A:STATION} costs {1:NUM} pounds on {DAY}",
    "the {A:TIME} train to {STATION} stops at {1:STATION} only",
    "trains to {A:STATION} run every {1:NUM} minutes until {2:TIME}",
    "the {A:DAY} express to {STATION} departs at {1:TIME}",
    "my train from {A:STATION} arrives on platform {1:NUM} at {TIME}",
    "book {NUM} seats on the {A:TIME} train to {1:STATION}",
    "the train from {A:STATION} to {STATION2} takes {1:NUM} minutes",
    "the last train to {A:STATION} leaves at {1:TIME} on {DAY}",
    "a {A:PRICE} rail pass covers {1:NUM} zones for {NUM} days",
    "the {A:STATION} station ticket office opens at {1:TIME} on {DAY}",
    "all trains from {A:STATION} are delayed by {1:NUM} minutes this {DAY}",
    # general
    "how can i help you with your {A:DOMAIN} booking this {1:DAY}",
    "thank you for booking the {A:DOMAIN} service for {DAY} {1:TIME}",
    "i found {NUM} {A:PRICE} options in the {1:AREA} area",
    "the {A:AREA} office is open {1:DAY} to {2:DAY} from {TIME}",
    "your {A:DOMAIN} reference code is {1:NUM} {2:NUM} {NUM}",
    "we sent the {A:DOMAIN} confirmation on {DAY} at {1:TIME}",
    "the {A:AREA} area gets busy around {1:TIME} on {2:DAY}",
    "please confirm your {A:DOMAIN} booking for {NUM} people by {1:TIME}",
    "our {A:PRICE} package includes {1:NUM} meals and {2:NUM} nights",
    "the queue in {A:AREA} is about {1:NUM} minutes long this {TIME}",
    "would you prefer the {A:AREA} branch or the {1:AREA} branch on {DAY}",
    "our office near {A:STATION} station closes at {1:TIME} on {2:DAY}",
]

_SLOT_RE = re.compile(r"\{([^}]+)\}")


def _assoc_value(pool: list[str], template_idx: int, anchor_key: str, ordinal: str) -> str:
    h = zlib.crc32(f"{template_idx}|{anchor_key}|{ordinal}".encode())
    return pool[h % len(pool)]


def template_anchors(template: str) -> list[str]:
    """All legal anchor keys of a template (entity first words or pool values)."""
    if "{H}" in template:
        return HOTEL_FIRST
    if "{R}" in template:
        return REST_FIRST
    for slot in _SLOT_RE.findall(template):
        if slot.startswith("A:"):
            return POOLS[slot[2:]]
    raise ValueError(f"template has no anchor: {template}")


def render_template(template: str, template_idx: int, rng: np.random.Generator, anchor_key=None):
    """Fill one template; association slots are a fixed function of the anchor."""
    if anchor_key is None:
        anchors = template_anchors(template)
        anchor_key = anchors[rng.integers(len(anchors))]
    fills: dict[str, str] = {}
    if "{H}" in template:
        fills["H"] = f"{anchor_key} {HOTEL_SECOND[HOTEL_FIRST.index(anchor_key) % len(HOTEL_SECOND)]}"
    if "{R}" in template:
        fills["R"] = f"{anchor_key} {REST_SECOND[REST_FIRST.index(anchor_key) % len(REST_SECOND)]}"
    for slot in _SLOT_RE.findall(template):
        if slot in fills:
            continue
        if slot.startswith("A:"):
            fills[slot] = anchor_key
        elif slot[0].isdigit():
            fills[slot] = _assoc_value(POOLS[slot.split(":")[1]], template_idx, anchor_key, slot[0])
        elif slot in ("H", "R"):
            continue
        elif slot.endswith("2"):
            pool = POOLS[slot[:-1]]
            base = fills.get(slot[:-1], "")
            value = pool[rng.integers(len(pool))]
            while value == base:
                value = pool[rng.integers(len(pool))]
            fills[slot] = value
        else:
            fills[slot] = POOLS[slot][rng.integers(len(POOLS[slot]))]
    out = template
    for slot, value in fills.items():
        out = out.replace("{%s}" % slot, value)
    return out


def generate_corpus(
    seed: int = 0,
    n_train: int = 2000,
    n_valid: int = 400,
    n_test: int = 0,
) -> tuple[list[str], list[str], list[str]]:
    """Unique sentences, disjoint splits, every association cell covered in train."""
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    train: list[str] = []

    # coverage sweep: each (template, anchor) cell at least once
    for ti, template in enumerate(TEMPLATES):
        for anchor_key in template_anchors(template):
            for _ in range(50):
                line = render_template(template, ti, rng, anchor_key=anchor_key)
                if line not in seen:
                    seen.add(line)
                    train.append(line)
                    break
    if len(train) > n_train:
        raise ValueError(f"n_train={n_train} too small for coverage ({len(train)} cells)")

    def sample_unique(count: int, accept) -> list[str]:
        out: list[str] = []
        attempts = 0
        while len(out) < count:
            attempts += 1
            if attempts > 500 * max(count, 1):
                raise RuntimeError("template pool too small for requested corpus size")
            ti = int(rng.integers(len(TEMPLATES)))
            line = render_template(TEMPLATES[ti], ti, rng)
            if line in seen or not accept(line):
                continue
            seen.add(line)
            out.append(line)
        return out

    train += sample_unique(n_train - len(train), lambda line: True)
    train = [train[i] for i in rng.permutation(len(train))]
    train_tokens = {t for line in train for t in line.split()}
    held = sample_unique(n_valid + n_test, lambda line: set(line.split()) <= train_tokens)
    return train, held[:n_valid], held[n_valid : n_valid + n_test]


def write_corpus(path: str, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
