"""Dialogue corpora: loading, sentence/document units, fake-PII filling, splits.

Sentence units are single utterances rendered as ``<SPEAKER>: <UTTERANCE>``;
document units concatenate every rendered utterance of one dialogue, one per
line, in turn order.
"""

from __future__ import annotations

import json
import logging
import random
import re
import unicodedata
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

SENTENCE = "sentence"
DOCUMENT = "document"
GRANULARITIES = (SENTENCE, DOCUMENT)

SPEAKER_SEP = ": "
LINE_JOINER = "\n"

# Source-token budgets used when packing sentence pairs into documents.
BUDGET_PRESETS = {"ja-en": 1200, "de-en": 1600}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_PLACEHOLDER_RE = re.compile(r"#([A-Z_]+)#")

PLACEHOLDER_CATEGORIES = {
    "NAME": "PERSON",
    "PRS_ORG": "ORG",
    "EMAIL": "EMAIL",
    "URL": "URL",
    "PHONE": "PHONE",
    "ORDER": "ORDER_NUMBER",
}

REQUIRED_FIELDS = ("dialogue_id", "turn", "speaker", "src", "tgt")


class CorpusError(ValueError):
    """Raised for malformed corpus input; carries the offending line if known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


def tokenize(text: str) -> list[str]:
    """Whitespace + punctuation split, case preserved."""
    return _TOKEN_RE.findall(text)


@dataclass(frozen=True)
class Utterance:
    dialogue_id: str
    turn: int
    speaker: str
    src: str
    tgt: str


@dataclass(frozen=True)
class ParallelUnit:
    unit_id: str
    granularity: str
    dialogue_id: str
    src: str
    tgt: str

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ParallelUnit":
        return cls(
            unit_id=str(obj["unit_id"]),
            granularity=str(obj["granularity"]),
            dialogue_id=str(obj["dialogue_id"]),
            src=obj["src"],
            tgt=obj["tgt"],
        )


@dataclass(frozen=True)
class LedgerEntry:
    """One fake PII value written into a target-side utterance."""

    dialogue_id: str
    category: str
    value: str
    turn: int
    char_start: int
    char_end: int


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train, self.val, self.test)
        if any(f <= 0 for f in fracs):
            raise ValueError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")


# ---------------------------------------------------------------------------
# I/O


def _validate(utterances: list[Utterance], path: str | None = None) -> list[Utterance]:
    by_dialogue: dict[str, list[int]] = defaultdict(list)
    for u in utterances:
        by_dialogue[u.dialogue_id].append(u.turn)
    for did, turns in by_dialogue.items():
        if sorted(turns) != list(range(len(turns))):
            raise CorpusError(
                f"dialogue {did!r}: turn indices must be dense from 0, got {sorted(turns)}",
                path=path,
            )
    return sorted(utterances, key=lambda u: (u.dialogue_id, u.turn))


def load_jsonl(path: str | Path) -> list[Utterance]:
    path = str(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON ({exc.msg})", line=lineno, path=path) from exc
            if not isinstance(obj, dict):
                raise CorpusError("expected a JSON object", line=lineno, path=path)
            missing = [f for f in REQUIRED_FIELDS if f not in obj]
            if missing:
                raise CorpusError(f"missing field(s) {missing}", line=lineno, path=path)
            turn = obj["turn"]
            if isinstance(turn, bool) or not isinstance(turn, int):
                raise CorpusError(f"turn must be an integer, got {turn!r}", line=lineno, path=path)
            out.append(
                Utterance(str(obj["dialogue_id"]), turn, str(obj["speaker"]), str(obj["src"]), str(obj["tgt"]))
            )
    return _validate(out, path=path)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def read_units(path: str | Path) -> list[ParallelUnit]:
    with open(path, encoding="utf-8") as fh:
        return [ParallelUnit.from_json(json.loads(line)) for line in fh if line.strip()]


def utterance_record(u: Utterance) -> dict:
    return asdict(u)


# ---------------------------------------------------------------------------
# Units


def render_line(speaker: str, text: str) -> str:
    return f"{speaker}{SPEAKER_SEP}{text}"


def to_sentence_units(utterances: Sequence[Utterance]) -> list[ParallelUnit]:
    return [
        ParallelUnit(
            unit_id=f"{u.dialogue_id}#{u.turn}",
            granularity=SENTENCE,
            dialogue_id=u.dialogue_id,
            src=render_line(u.speaker, u.src),
            tgt=render_line(u.speaker, u.tgt),
        )
        for u in utterances
    ]


def group_dialogues(utterances: Iterable[Utterance]) -> dict[str, list[Utterance]]:
    groups: dict[str, list[Utterance]] = defaultdict(list)
    for u in utterances:
        groups[u.dialogue_id].append(u)
    return {did: sorted(us, key=lambda u: u.turn) for did, us in sorted(groups.items())}


def to_document_units(utterances: Sequence[Utterance]) -> list[ParallelUnit]:
    units = []
    for did, turns in group_dialogues(utterances).items():
        units.append(
            ParallelUnit(
                unit_id=did,
                granularity=DOCUMENT,
                dialogue_id=did,
                src=LINE_JOINER.join(render_line(u.speaker, u.src) for u in turns),
                tgt=LINE_JOINER.join(render_line(u.speaker, u.tgt) for u in turns),
            )
        )
    return units


def flatten_document(unit: ParallelUnit) -> list[tuple[str, str]]:
    """Split a document unit back into its (src, tgt) lines."""
    src_lines = unit.src.split(LINE_JOINER)
    tgt_lines = unit.tgt.split(LINE_JOINER)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(f"document {unit.unit_id!r} has misaligned sides")
    return list(zip(src_lines, tgt_lines))


def build_token_budget_documents(
    sentence_pairs: Sequence[tuple[str, str]],
    budget_src_tokens: int,
    id_prefix: str = "budget",
) -> list[ParallelUnit]:
    """Greedily pack consecutive pairs into documents of about ``budget_src_tokens``.

    A document closes right after the pair that brings it to the budget, so the
    crossing pair stays in the document it crossed.
    """
    if budget_src_tokens < 1:
        raise ValueError("budget_src_tokens must be >= 1")
    docs: list[ParallelUnit] = []
    cur: list[tuple[str, str]] = []
    n_tokens = 0

    def close():
        did = f"{id_prefix}-{len(docs):05d}"
        docs.append(
            ParallelUnit(
                unit_id=did,
                granularity=DOCUMENT,
                dialogue_id=did,
                src=LINE_JOINER.join(s for s, _ in cur),
                tgt=LINE_JOINER.join(t for _, t in cur),
            )
        )

    for src, tgt in sentence_pairs:
        cur.append((src, tgt))
        n_tokens += len(tokenize(src))
        if n_tokens >= budget_src_tokens:
            close()
            cur, n_tokens = [], 0
    if cur:
        close()
    return docs


# ---------------------------------------------------------------------------
# Fake PII

_FIRST_NAMES = {
    "de": [
        "Immo", "Jutta", "Heinz", "Ingrid", "Ralf", "Sabine", "Uwe", "Monika", "Dieter",
        "Gisela", "Torsten", "Petra", "Volker", "Brigitte", "Jens", "Anke", "Holger",
        "Karin", "Bernd", "Elke", "Frank", "Heike", "Lothar", "Ursula", "Wolfgang",
        "Renate", "Detlef", "Birgit", "Klaus", "Marlene", "Gerd", "Annegret", "Helmut",
        "Silke", "Rüdiger", "Hannelore", "Kai", "Doris", "Manfred", "Edith",
    ],
    "en": [
        "Oliver", "Amelia", "George", "Isla", "Harry", "Ava", "Jack", "Mia", "Jacob",
        "Emily", "Charlie", "Grace", "Thomas", "Sophie", "Oscar", "Lily", "William",
        "Freya", "James", "Ella", "Henry", "Alice", "Arthur", "Florence", "Alfie",
        "Evie", "Joshua", "Poppy", "Leo", "Ruby",
    ],
}

_LAST_NAMES = {
    "de": [
        "Hande-Hornig", "Geisler", "Conradi", "Schwital", "Trupp", "Stroh", "Jäckel",
        "Zorbach", "Hentschel", "Möchlichen", "Wohlgemut", "Kambs", "Seidel",
        "Dörschner", "Mude", "Ziegert", "Gute", "Pärtzelt", "Rädel", "Löchel", "Heser",
        "Kreusel", "Holsten", "Bloch", "Dussen", "Weinhage", "Zänker", "Atzler",
        "Scholz", "Klapp", "Jungfer", "Lange", "Eigenwillig", "Hölzenbecher", "Riehl",
        "Briemer", "Gotthard", "Nerger", "Ullmann", "Wernecke",
    ],
    "en": [
        "Smith", "Jones", "Taylor", "Brown", "Williams", "Wilson", "Johnson", "Davies",
        "Robinson", "Wright", "Thompson", "Evans", "Walker", "White", "Roberts", "Green",
        "Hall", "Wood", "Jackson", "Clarke", "Hughes", "Edwards", "Turner", "Parker",
        "Collins", "Harris", "Morris", "Cooper", "Ward", "Baker",
    ],
}

_ORG_SUFFIXES = {"de": ["GmbH", "AG", "KG", "OHG"], "en": ["Ltd", "LLC", "PLC", "Group"]}
_URL_WORDS = [
    "suessebier", "blumenwelt", "buecherwurm", "lesestoff", "kaffeehaus", "teeladen",
    "spielkiste", "gartenglueck", "radhaus", "wollstube", "kuechenprofi", "leuchtturm",
    "papierkram", "sockenland", "brotzeit", "wanderlust", "zeitgeist", "bastelecke",
]
_URL_PAGES = {"de": ["shop", "kontakt", "hilfe", "konto", "bestellung"], "en": ["shop", "contact", "help", "account", "orders"]}
_TLD = {"de": "de", "en": "com"}
_MAIL_DOMAINS = {"de": ["web.de", "gmx.de", "posteo.de", "mail.de"], "en": ["mail.com", "post.uk", "inbox.com"]}
_PHONE_PREFIX = {"de": ("+49", ["30", "40", "89", "221", "69", "711"]), "en": ("+44", ["20", "161", "121", "131"])}

_ASCII_MAP = str.maketrans({"ä": "ae", "ö": "oe", "ü": "ue", "ß": "ss", "Ä": "Ae", "Ö": "Oe", "Ü": "Ue"})


def _ascii_slug(text: str) -> str:
    text = text.translate(_ASCII_MAP)
    text = unicodedata.normalize("NFKD", text).encode("ascii", "ignore").decode()
    return re.sub(r"[^a-z0-9]", "", text.lower())


def _fake_values(rng: random.Random, locale: str) -> dict[str, str]:
    """One consistent set of fake PII values for a dialogue."""
    if locale not in _FIRST_NAMES:
        raise ValueError(f"unsupported locale {locale!r}; expected one of {sorted(_FIRST_NAMES)}")
    first = rng.choice(_FIRST_NAMES[locale])
    last = rng.choice(_LAST_NAMES[locale])
    org_a, org_b = rng.sample(_LAST_NAMES[locale], 2)
    cc, areas = _PHONE_PREFIX[locale]
    return {
        "NAME": f"{first} {last}",
        "PRS_ORG": f"{org_a} {org_b} {rng.choice(_ORG_SUFFIXES[locale])}",
        "EMAIL": f"{_ascii_slug(first)}_{_ascii_slug(last)}@{rng.choice(_MAIL_DOMAINS[locale])}",
        "URL": f"{rng.choice(_URL_WORDS)}.{_TLD[locale]}/{rng.choice(_URL_PAGES[locale])}",
        "PHONE": f"{cc} {rng.choice(areas)} {rng.randrange(10**6, 10**7)}",
        "ORDER": f"160{rng.randrange(10**6):06d}",
    }


def replace_pii(
    utterances: Sequence[Utterance], locale: str = "de", seed: int = 0
) -> tuple[list[Utterance], list[LedgerEntry]]:
    """Fill ``#NAME#``-style placeholders with per-dialogue consistent fake values.

    Both sides of an utterance get the same value. The ledger records the
    character span of every insertion on the target side.
    """
    out: list[Utterance] = []
    ledger: list[LedgerEntry] = []
    values_by_dialogue: dict[str, dict[str, str]] = {}

    for u in utterances:
        if u.dialogue_id not in values_by_dialogue:
            values_by_dialogue[u.dialogue_id] = _fake_values(random.Random(f"{seed}:{u.dialogue_id}"), locale)
        values = values_by_dialogue[u.dialogue_id]

        def fill(text: str, record: bool) -> str:
            parts: list[str] = []
            pos = 0
            length = 0
            for m in _PLACEHOLDER_RE.finditer(text):
                kind = m.group(1)
                if kind not in PLACEHOLDER_CATEGORIES:
                    raise CorpusError(f"unknown placeholder #{kind}# in dialogue {u.dialogue_id!r} turn {u.turn}")
                chunk = text[pos : m.start()]
                parts.append(chunk)
                length += len(chunk)
                value = values[kind]
                if record:
                    ledger.append(
                        LedgerEntry(u.dialogue_id, PLACEHOLDER_CATEGORIES[kind], value, u.turn, length, length + len(value))
                    )
                parts.append(value)
                length += len(value)
                pos = m.end()
            parts.append(text[pos:])
            return "".join(parts)

        out.append(Utterance(u.dialogue_id, u.turn, u.speaker, fill(u.src, False), fill(u.tgt, True)))

    collisions = pii_collisions(ledger)
    if collisions:
        logger.info("%d fake PII values are shared across dialogues", len(collisions))
    return out, ledger


def has_placeholders(utterances: Iterable[Utterance]) -> bool:
    return any(_PLACEHOLDER_RE.search(u.src) or _PLACEHOLDER_RE.search(u.tgt) for u in utterances)


def pii_collisions(ledger: Iterable[LedgerEntry]) -> dict[tuple[str, str], set[str]]:
    """Values (per category) that were assigned to more than one dialogue."""
    owners: dict[tuple[str, str], set[str]] = defaultdict(set)
    for e in ledger:
        owners[(e.category, e.value)].add(e.dialogue_id)
    return {k: v for k, v in owners.items() if len(v) > 1}


def ledger_record(e: LedgerEntry) -> dict:
    return asdict(e)


def gazetteer_from_ledger(ledger: Iterable[LedgerEntry]) -> dict[str, set[str]]:
    gaz: dict[str, set[str]] = {"PERSON": set(), "ORG": set()}
    for e in ledger:
        if e.category in gaz:
            gaz[e.category].add(e.value)
    return gaz


# ---------------------------------------------------------------------------
# Synthetic customer-support dialogues

CUSTOMER = "Customer"
AGENT = "Agent"

# (source, target) templates keyed by speaker and the PII slot they carry.
_TEMPLATES: dict[tuple[str, str | None], list[tuple[str, str]]] = {
    (CUSTOMER, "NAME"): [
        ("Hallo , mein Name ist #NAME# .", "Hello , my name is #NAME# ."),
        ("Hier spricht #NAME# .", "This is #NAME# speaking ."),
        ("Die Bestellung läuft auf #NAME# .", "The order is under #NAME# ."),
    ],
    (AGENT, "NAME"): [
        ("Guten Morgen #NAME# , wie kann ich helfen ?", "Good morning #NAME# , how can I help ?"),
        ("Vielen Dank #NAME# für Ihre Geduld .", "Thank you #NAME# for your patience ."),
        ("Einen schönen Tag noch , #NAME# .", "Have a nice day , #NAME# ."),
    ],
    (CUSTOMER, "PRS_ORG"): [
        ("Ich habe ein Buch bei #PRS_ORG# bestellt .", "I ordered a book from #PRS_ORG# ."),
        ("Das Paket von #PRS_ORG# ist nicht angekommen .", "The parcel from #PRS_ORG# has not arrived ."),
    ],
    (AGENT, "PRS_ORG"): [
        ("Ich kontaktiere #PRS_ORG# für Sie .", "I will contact #PRS_ORG# for you ."),
        ("Der Versand erfolgt durch #PRS_ORG# .", "The shipping is done by #PRS_ORG# ."),
    ],
    (CUSTOMER, "EMAIL"): [
        ("Meine E-Mail ist #EMAIL# !", "My email is #EMAIL# !"),
        ("Schreiben Sie mir an #EMAIL# !", "Write to me at #EMAIL# !"),
    ],
    (AGENT, "EMAIL"): [
        ("Ich schicke die Bestätigung an #EMAIL# !", "I will send the confirmation to #EMAIL# !"),
        ("Ist #EMAIL# noch aktuell ?", "Is #EMAIL# still current ?"),
    ],
    (CUSTOMER, "URL"): [
        ("Ich habe auf #URL# bestellt !", "I ordered on #URL# !"),
        ("Die Seite #URL# funktioniert nicht !", "The page #URL# does not work !"),
    ],
    (AGENT, "URL"): [
        ("Bitte gehen Sie auf #URL# !", "Please go to #URL# !"),
        ("Sie finden alles unter #URL# !", "You can find everything at #URL# !"),
    ],
    (CUSTOMER, "PHONE"): [
        ("Meine Nummer ist #PHONE# .", "My number is #PHONE# ."),
        ("Rufen Sie mich unter #PHONE# an .", "Call me at #PHONE# ."),
    ],
    (AGENT, "PHONE"): [
        ("Wir rufen Sie unter #PHONE# an .", "We will call you at #PHONE# ."),
        ("Ist #PHONE# Ihre Nummer ?", "Is #PHONE# your number ?"),
    ],
    (CUSTOMER, "ORDER"): [
        ("Meine Bestellnummer ist #ORDER# .", "My order number is #ORDER# ."),
        ("Es geht um die Bestellung #ORDER# .", "It is about the order #ORDER# ."),
    ],
    (AGENT, "ORDER"): [
        ("Die Bestellung #ORDER# wurde versandt .", "The order #ORDER# has been shipped ."),
        ("Haben Sie die Bestellnummer #ORDER# ?", "Do you have the order number #ORDER# ?"),
    ],
    (CUSTOMER, None): [
        ("Ich warte seit zwei Wochen auf mein Paket .", "I have been waiting two weeks for my parcel ."),
        ("Können Sie mir bitte helfen ?", "Can you please help me ?"),
        ("Ja , das ist richtig .", "Yes , that is correct ."),
        ("Nein , danke .", "No , thank you ."),
        ("Wann kommt die Lieferung ?", "When will the delivery arrive ?"),
        ("Ich möchte die Bestellung stornieren .", "I would like to cancel the order ."),
        ("Das Buch ist beschädigt .", "The book is damaged ."),
        ("Vielen Dank für Ihre Hilfe .", "Thank you for your help ."),
    ],
    (AGENT, None): [
        ("Einen Moment bitte .", "One moment please ."),
        ("Ich prüfe das für Sie .", "I will check that for you ."),
        ("Das tut mir leid .", "I am sorry about that ."),
        ("Gibt es noch etwas ?", "Is there anything else ?"),
        ("Die Lieferung dauert drei Tage .", "The delivery takes three days ."),
        ("Ich habe eine Rückerstattung veranlasst .", "I have arranged a refund ."),
        ("Können Sie das bitte bestätigen ?", "Can you please confirm that ?"),
        ("Gern geschehen .", "You are welcome ."),
    ],
}

_OTHER_SLOTS = ("PRS_ORG", "EMAIL", "URL", "PHONE", "ORDER")


def _plan_slots(rng: random.Random, n_turns: int, pii_density: float) -> list[str | None]:
    slots: list[str | None] = [None] * n_turns
    if pii_density <= 0:
        return slots
    # The customer introduces themself and the agent greets them by name,
    # so every dialogue repeats the name across turns.
    slots[0] = slots[1] = "NAME"
    chosen = ["NAME"]
    free = list(range(2, n_turns))
    for slot in _OTHER_SLOTS:
        if len(free) < 2 or rng.random() >= pii_density:
            continue
        for t in rng.sample(free, 2):
            slots[t] = slot
            free.remove(t)
        chosen.append(slot)
    for t in free:
        if rng.random() < pii_density:
            slots[t] = rng.choice(chosen)
    return slots


def synth_corpus(
    n_dialogues: int,
    turns_range: tuple[int, int] = (6, 14),
    pii_density: float = 0.6,
    seed: int = 0,
    locale: str = "de",
    id_prefix: str = "d",
) -> tuple[list[Utterance], list[LedgerEntry]]:
    """Template customer-support dialogues (German source, English target).

    Every PII entity used in a dialogue appears in at least two turns. Returns
    the filled utterances and the ledger of inserted target-side PII.
    """
    if n_dialogues < 1:
        raise ValueError("n_dialogues must be >= 1")
    lo, hi = turns_range
    if lo < 2 or hi < lo:
        raise ValueError(f"turns_range must satisfy 2 <= lo <= hi, got {turns_range}")
    if not 0.0 <= pii_density <= 1.0:
        raise ValueError("pii_density must be in [0, 1]")

    rng = random.Random(seed)
    width = len(str(n_dialogues - 1))
    templated = []
    for i in range(n_dialogues):
        did = f"{id_prefix}{i:0{width}d}"
        n_turns = rng.randint(lo, hi)
        slots = _plan_slots(rng, n_turns, pii_density)
        for t, slot in enumerate(slots):
            speaker = CUSTOMER if t % 2 == 0 else AGENT
            src, tgt = rng.choice(_TEMPLATES[(speaker, slot)])
            templated.append(Utterance(did, t, speaker, src, tgt))
    return replace_pii(templated, locale=locale, seed=seed)


# ---------------------------------------------------------------------------
# Splits


def split(
    utterances: Sequence[Utterance], spec: SplitSpec
) -> tuple[list[Utterance], list[Utterance], list[Utterance]]:
    """Partition by dialogue so no dialogue straddles two splits."""
    dialogues = group_dialogues(utterances)
    ids = list(dialogues)
    n = len(ids)
    n_train = int(round(spec.train * n))
    n_val = int(round(spec.val * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise CorpusError(f"{n} dialogues are too few for three non-empty splits with {spec}")
    order = random.Random(spec.seed).sample(ids, n)
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple(  # type: ignore[return-value]
        [u for did in sorted(part) for u in dialogues[did]] for part in parts
    )


def max_utterances(utterances: Iterable[Utterance]) -> int:
    return max(len(turns) for turns in group_dialogues(utterances).values())
