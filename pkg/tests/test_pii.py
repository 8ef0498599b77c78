import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from granudp import corpus as C
from granudp.pii import (
    CATEGORIES,
    Detector,
    LeakageReport,
    PiiError,
    PiiSpan,
    detect,
    leakage_percentage,
    privacy_verdict,
)


def cats(text, gaz=None):
    return [(s.category, s.text) for s in detect(text, gaz)]


class TestDetect:
    def test_url_in_sentence(self):
        assert cats("Go to http://www.suessebier.de/") == [("URL", "http://www.suessebier.de/")]

    def test_truncated_order_number(self):
        text = "It's the order number that starts 160….."
        (span,) = detect(text)
        assert span.category == "ORDER_NUMBER" and span.text.startswith("160…")

    @pytest.mark.parametrize(
        "text,expected",
        [
            ("Write to jutta.kraus@web.de please", [("EMAIL", "jutta.kraus@web.de")]),
            ("See www.kaffeehaus.de/konto", [("URL", "www.kaffeehaus.de/konto")]),
            ("Visit kaffeehaus.de today", [("URL", "kaffeehaus.de")]),
            ("Call +49 30 1234567", [("PHONE", "+49 30 1234567")]),
            ("Call 030 1234567", [("PHONE", "030 1234567")]),
            ("Order 8812345 was late", [("ORDER_NUMBER", "8812345")]),
            ("Nothing here at all", []),
            ("I waited 12 days", []),
        ],
    )
    def test_patterns(self, text, expected):
        assert cats(text) == expected

    def test_gazetteer(self):
        gaz = {"PERSON": {"Jutta Kraus", "Jutta"}, "ORG": {"Kraus AG"}}
        assert cats("Jutta Kraus from Kraus AG", gaz) == [("PERSON", "Jutta Kraus"), ("ORG", "Kraus AG")]

    def test_gazetteer_word_boundaries(self):
        assert cats("Juttas", {"PERSON": {"Jutta"}}) == []

    def test_email_beats_embedded_url(self):
        # the domain alone would match URL but the longer EMAIL starts earlier
        assert cats("a.b@kaffee.de") == [("EMAIL", "a.b@kaffee.de")]

    def test_bad_gazetteer_category(self):
        with pytest.raises(PiiError):
            Detector({"EMAIL": {"x"}})

    def test_span_validation(self):
        with pytest.raises(PiiError):
            PiiSpan("NAME", "x", 0, 1)
        with pytest.raises(PiiError):
            PiiSpan("URL", "x", 2, 2)

    @given(st.text(alphabet="ab1 .@/:+-w0", max_size=60))
    @settings(max_examples=200, deadline=None)
    def test_spans_non_overlapping_and_sorted(self, text):
        spans = detect(text, {"PERSON": {"ab"}})
        for s in spans:
            assert text[s.start : s.end] == s.text and s.category in CATEGORIES
        for a, b in zip(spans, spans[1:]):
            assert a.end <= b.start


def test_planted_recall_on_synthetic_corpus():
    utts, ledger = C.synth_corpus(100, seed=7)
    gaz = C.gazetteer_from_ledger(ledger)
    detector = Detector(gaz)
    by_key = {(u.dialogue_id, u.turn): u for u in utts}
    found = {}
    for e in ledger:
        key = (e.dialogue_id, e.turn)
        if key not in found:
            found[key] = {(s.start, s.end, s.category) for s in detector(by_key[key].tgt)}
        assert (e.char_start, e.char_end, e.category) in found[key], e


def sent(i, tgt):
    return C.ParallelUnit(f"d{i}#0", C.SENTENCE, f"d{i}", "x", tgt)


class TestLeakage:
    members = [
        sent(0, "Mail jutta@web.de or call +49 30 1234567"),
        sent(1, "My order 5551234"),
        sent(2, "Thanks"),
        sent(3, "Visit www.shop.de"),
    ]

    def test_arithmetic(self):
        r = leakage_percentage([self.members[0], self.members[2]], self.members)
        assert (r.detected_pii_count, r.total_pii_count) == (2, 4)
        assert r.leakage_fraction == 0.5
        assert (r.detected_unit_count, r.total_unit_count) == (1, 3)
        assert privacy_verdict(r) == "fail"

    def test_no_true_positives(self):
        r = leakage_percentage([], self.members)
        assert r.leakage_fraction == 0.0 and privacy_verdict(r) == "pass"
        assert r.row("x", "doc", "1")["leakage_pct"] == 0.0

    def test_monotone_in_true_positives(self):
        prev = -1.0
        for k in range(len(self.members) + 1):
            frac = leakage_percentage(self.members[:k], self.members).leakage_fraction
            assert frac >= prev
            prev = frac
        assert prev == 1.0

    def test_undefined_without_pii(self):
        r = leakage_percentage([], [sent(0, "hello")])
        assert r.leakage_fraction is None and not r.defined
        assert r.row("x", "sen", "inf")["verdict"] == "undefined"
        with pytest.raises(PiiError):
            privacy_verdict(r)

    def test_true_positive_outside_members(self):
        with pytest.raises(PiiError):
            leakage_percentage([sent(9, "a")], self.members)

    @pytest.mark.parametrize("detected,verdict", [(4, "pass"), (49, "pass"), (50, "fail"), (51, "fail")])
    def test_verdict_threshold(self, detected, verdict):
        assert privacy_verdict(LeakageReport(detected, 100, 0, 0)) == verdict

    def test_row_fields(self):
        row = LeakageReport(1, 4, 1, 2).row("r", "sen", "inf")
        assert list(row) == list(LeakageReport.CSV_FIELDS)
        assert row["leakage_pct"] == 25.0 and row["verdict"] == "pass"
