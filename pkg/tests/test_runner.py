import csv
import json
import math

import pytest

from granudp import accountant, cli
from granudp import runner as R

TINY = {
    "corpus": {"n_dialogues": 20, "turns": [4, 6], "seed": 0},
    "public": {"n_dialogues": 8, "turns": [4, 6], "budget_src_tokens": 40},
    "experiment": {
        "tags": ["sen", "doc"],
        "epsilons": ["inf", 1.0],
        "seeds": [0, 1],
        "nonprivate_seeds": [0, 1],
        "dim": 4,
        "bleu_max_units": 10,
    },
    "train": {
        "sen": {"nonprivate": {"epochs": 2.0, "lot_size": 16, "learning_rate": 1.0, "warmup_steps": 0},
                "private": {"epochs": 1.0, "lot_size": 16}},
        "doc": {"nonprivate": {"epochs": 2.0, "lot_size": 4, "learning_rate": 1.0, "warmup_steps": 0},
                "private": {"epochs": 1.0, "lot_size": 4}},
    },
}


def tiny(**overrides):
    raw = json.loads(json.dumps(TINY))
    for key, value in overrides.items():
        section, field = key.split("__")
        raw.setdefault(section, {})[field] = value
    return R.config_from_dict(raw)


@pytest.fixture(scope="module")
def done(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = tiny()
    R.run_experiment(cfg, out)
    return cfg, out


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    @pytest.mark.parametrize(
        "raw,field",
        [
            ({"corpus": {"n_dialogues": "many"}}, "corpus.n_dialogues"),
            ({"corpus": {"colour": 1}}, "colour"),
            ({"experiment": {"epsilons": [0]}}, "epsilon"),
            ({"experiment": {"tags": ["para"]}}, "para"),
            ({"experiment": {"delta": 2.0}}, "experiment.delta"),
            ({"experiment": {"reference_seed": 9}}, "experiment.reference_seed"),
            ({"train": {"sen": {"private": {"lot_size": 0}}}}, "train.sen.private"),
            ({"train": {"augdoc_zero_shot": {"private": {}}}}, "train.augdoc_zero_shot.private"),
            ({"corpus": {"source": "jsonl"}}, "corpus.path"),
            ({"split": {"train": 0.9}}, "split"),
            ({"bogus": 1}, "bogus"),
        ],
    )
    def test_errors_name_the_field(self, raw, field):
        with pytest.raises(R.ConfigError, match=field.replace(".", r"\.")):
            R.config_from_dict(raw)

    def test_defaults(self):
        cfg = R.config_from_dict({})
        assert cfg.delta == 1e-8 and cfg.epsilons is None and cfg.tags == ("sen", "doc")

    def test_toml(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[experiment]\ntags = ["sen", "augdoc-zero-shot"]\nepsilons = ["inf", 2]\n', encoding="utf-8")
        cfg = R.load_config(p)
        assert cfg.tags == ("sen", "augdoc_zero_shot") and cfg.epsilons == (math.inf, 2.0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(R.ConfigError):
            R.load_config(tmp_path / "nope.toml")

    def test_shipped_configs_load(self):
        from pathlib import Path

        for p in sorted((Path(__file__).parents[1] / "configs").glob("*.toml")):
            R.load_config(p)

    def test_epsilon_format(self):
        assert R.format_epsilon(math.inf) == "inf" and R.format_epsilon(990.0) == "990"
        assert R.run_id("sen", 1.0, 3) == "sen_eps-1_seed-3"


def test_ladder():
    cfg = tiny(experiment__epsilons="ladder", experiment__ladder_base=1.0)
    assert R.epsilon_ladder(cfg, 99) == (math.inf, 990.0, 99.0, 10.0, 1.0)


class TestPrepare:
    def test_files_and_determinism(self, tmp_path):
        cfg = tiny()
        a, b = tmp_path / "a", tmp_path / "b"
        R.cmd_prepare(cfg, a)
        R.cmd_prepare(cfg, b)
        files = sorted(p.relative_to(a) for p in (a / R.PREPARED).rglob("*") if p.is_file())
        names = {str(p) for p in files}
        for required in ("sentence_units.jsonl", "document_units.jsonl", "pii_ledger.jsonl", "vocab.json",
                         "manifest.json", "splits/train.txt", "splits/val.txt", "splits/test.txt"):
            assert f"{R.PREPARED}/{required}" in names
        for rel in files:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_overwrite_required_for_different_data(self, tmp_path):
        R.cmd_prepare(tiny(), tmp_path)
        R.cmd_prepare(tiny(), tmp_path)  # same data config: idempotent
        with pytest.raises(R.PrerequisiteError):
            R.cmd_prepare(tiny(corpus__seed=5), tmp_path)
        R.cmd_prepare(tiny(corpus__seed=5), tmp_path, overwrite=True)

    def test_changed_data_config_detected(self, tmp_path):
        R.cmd_prepare(tiny(), tmp_path)
        with pytest.raises(R.PrerequisiteError):
            R.load_prepared(tiny(corpus__seed=5), tmp_path)

    def test_jsonl_source(self, tmp_path):
        src = tmp_path / "c.jsonl"
        recs = [{"dialogue_id": f"x{d}", "turn": t, "speaker": "Customer", "src": f"hallo {d}", "tgt": f"hello {d}"}
                for d in range(10) for t in range(3)]
        src.write_text("".join(json.dumps(r) + "\n" for r in recs), encoding="utf-8")
        cfg = R.config_from_dict({"corpus": {"source": "jsonl", "path": str(src)}, "public": {"n_dialogues": 4}})
        R.cmd_prepare(cfg, tmp_path / "out")
        prep = R.load_prepared(cfg, tmp_path / "out")
        assert prep.max_utterances == 3


class TestPipeline:
    def test_run_layout(self, done):
        cfg, out = done
        rdir = out / R.RUNS / "sen_eps-1_seed-0"
        for name in ("checkpoint.bin", "loss_history.csv", "accounting.csv", "bleu.csv", "run.json", "mia.csv",
                     "mia_true_positives.jsonl", "pii.csv", "pii_spans.jsonl"):
            assert (rdir / name).exists(), name
        for name in ("bleu.csv", "accounting.csv", "mia.csv", "pii.csv", "aggregate.csv", "tau.json"):
            assert (out / R.RESULTS / name).exists(), name

    def test_nonprivate_accounting_is_inf(self, done):
        _, out = done
        (row,) = read_csv(out / R.RUNS / "doc_eps-inf_seed-0" / "accounting.csv")
        assert row["epsilon"] == "inf" and float(row["sigma"]) == 0.0

    def test_private_accounting_within_budget(self, done):
        _, out = done
        for tag in ("sen", "doc"):
            (row,) = read_csv(out / R.RUNS / f"{tag}_eps-1_seed-1" / "accounting.csv")
            eps = float(row["epsilon"])
            assert 0.99 < eps <= 1.0
            assert accountant.epsilon_for(float(row["sigma"]), float(row["q"]), int(row["steps"])) == eps

    def test_seeds_share_tau(self, done):
        _, out = done
        taus = {r["tau"] for r in read_csv(out / R.RESULTS / "mia.csv")}
        assert len(taus) == 1

    def test_balanced_attack(self, done):
        _, out = done
        for r in read_csv(out / R.RESULTS / "mia.csv"):
            assert int(r["tp"]) + int(r["fn"]) == int(r["fp"]) + int(r["tn"])

    def test_aggregate(self, done):
        _, out = done
        rows = read_csv(out / R.RESULTS / "aggregate.csv")
        assert [(r["model_tag"], r["epsilon"]) for r in rows] == [("sen", "inf"), ("sen", "1"), ("doc", "inf"), ("doc", "1")]
        assert all(r["n_seeds"] == "2" for r in rows)
        mia = read_csv(out / R.RESULTS / "mia.csv")
        advs = [float(r["advantage"]) for r in mia if r["run_id"].startswith("sen_eps-inf")]
        assert float(rows[0]["advantage_mean"]) == pytest.approx(sum(advs) / 2)
        assert float(rows[0]["advantage_std"]) == pytest.approx(abs(advs[0] - advs[1]) / 2)

    def test_rerun_needs_overwrite(self, done):
        cfg, out = done
        with pytest.raises(R.PrerequisiteError):
            R.run_experiment(cfg, out)
        with pytest.raises(R.PrerequisiteError):
            R.cmd_train(cfg, out, "sen", math.inf, 0)


class TestPrerequisites:
    def test_attack_without_reference(self, tmp_path):
        cfg = tiny()
        R.cmd_prepare(cfg, tmp_path)
        R.cmd_train(cfg, tmp_path, "doc", math.inf, 1)
        with pytest.raises(R.PrerequisiteError, match="reference"):
            R.cmd_attack(cfg, tmp_path, "doc", math.inf, 1)

    def test_pii_before_attack(self, tmp_path):
        cfg = tiny()
        R.cmd_prepare(cfg, tmp_path)
        R.cmd_train(cfg, tmp_path, "sen", math.inf, 0)
        with pytest.raises(R.PrerequisiteError, match="attack"):
            R.cmd_pii_eval(cfg, tmp_path, "sen", math.inf, 0)

    def test_augdoc_needs_zero_shot(self, tmp_path):
        cfg = tiny()
        R.cmd_prepare(cfg, tmp_path)
        with pytest.raises(R.PrerequisiteError):
            R.cmd_train(cfg, tmp_path, "augdoc", 1.0, 0)

    def test_train_before_prepare(self, tmp_path):
        with pytest.raises(R.PrerequisiteError):
            R.cmd_train(tiny(), tmp_path, "sen", math.inf, 0)

    def test_report_without_runs(self, tmp_path):
        with pytest.raises(R.PrerequisiteError):
            R.cmd_report(tmp_path)


def test_plan_includes_reference_and_zero_shot():
    cfg = tiny(experiment__tags=["doc", "augdoc"])
    plan = R.planned_runs(cfg, (math.inf, 1.0))
    assert plan[0] == ("sen", math.inf, 0)
    zs = [p for p in plan if p[0] == "augdoc_zero_shot"]
    ad = [p for p in plan if p[0] == "augdoc"]
    assert zs and plan.index(zs[-1]) < plan.index(ad[0])
    assert {s for _, _, s in ad} <= {s for _, _, s in zs}


def test_augdoc_chain(tmp_path):
    cfg = tiny(experiment__tags=["augdoc"])
    R.cmd_prepare(cfg, tmp_path)
    R.cmd_train(cfg, tmp_path, "augdoc_zero_shot", math.inf, 0)
    rec = R.cmd_train(cfg, tmp_path, "augdoc", 1.0, 0)
    assert rec.epsilon_spent <= 1.0


class TestCli:
    def toml(self, tmp_path, body):
        p = tmp_path / "c.toml"
        p.write_text(body, encoding="utf-8")
        return str(p)

    def test_config_error_exit_code(self, tmp_path, capsys):
        cfg = self.toml(tmp_path, "[corpus]\nn_dialogues = 'x'\n")
        assert cli.main(["prepare", "--config", cfg, "--out", str(tmp_path / "o")]) == R.EXIT_CONFIG
        assert "corpus.n_dialogues" in capsys.readouterr().err

    def test_prerequisite_exit_code(self, tmp_path):
        cfg = self.toml(tmp_path, "[corpus]\nn_dialogues = 20\n")
        code = cli.main(["attack", "--config", cfg, "--out", str(tmp_path / "o"), "--tag", "sen", "--epsilon", "inf", "--seed", "0"])
        assert code == R.EXIT_PREREQUISITE

    def test_bad_epsilon(self, tmp_path):
        cfg = self.toml(tmp_path, "")
        code = cli.main(["train", "--config", cfg, "--out", str(tmp_path), "--tag", "sen", "--epsilon", "-1", "--seed", "0"])
        assert code == R.EXIT_CONFIG

    def test_account(self, capsys):
        assert cli.main(["account", "--sigma", "1.0", "--q", "0.01", "--steps", "100", "--group-size", "40"]) == 0
        rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
        assert float(rows[0]["epsilon"]) == accountant.epsilon_for(1.0, 0.01, 100)
        assert rows[0]["group_vacuous"] == "True"

    def test_account_calibrates(self, capsys):
        assert cli.main(["account", "--epsilon", "2", "--q", "0.05", "--steps", "200"]) == 0
        (row,) = csv.DictReader(capsys.readouterr().out.splitlines())
        assert 1.98 < float(row["epsilon"]) <= 2.0

    def test_account_needs_one_mode(self):
        assert cli.main(["account", "--q", "0.05", "--steps", "200"]) == R.EXIT_CONFIG
