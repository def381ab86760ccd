import re
from pathlib import Path

import pytest

from ctxnmt import cli
from ctxnmt import experiment as E
from ctxnmt.experiment import (
    Cell,
    ExperimentConfig,
    ExperimentConfigError,
    ExperimentReport,
    cell_fingerprint,
    emit_report,
    expand_grid,
    format_report,
    parse_config_text,
    run_grid,
)

TINY = """
# a grid small enough for unit tests
task = copy
vocab_size = 10
documents = 16
valid_documents = 3
test_documents = 3
min_len = 2
max_len = 4
bpe_merges = 10
d_model = 16
num_heads = 2
d_ff = 16
encoder_layers = 1
decoder_layers = 1
steps = 4
finetune_steps = 3
warmup = 2
valid_every = 2
max_tokens = 128
beam = 2
seeds = 1
"""


def write_cfg(tmp_path, extra="", name="grid.cfg"):
    over = {l.split("=")[0].strip() for l in extra.splitlines() if "=" in l}
    base = "\n".join(l for l in TINY.splitlines() if l.split("=")[0].strip() not in over)
    p = tmp_path / name
    p.write_text(base + "\n" + extra, encoding="utf-8")
    return p


class TestConfig:
    def test_parse(self):
        raw = parse_config_text("a = 1  # note\n\n# skip\nb = x, y\n")
        assert raw == {"a": "1", "b": "x, y"}

    @pytest.mark.parametrize("text, msg", [("a 1\n", ":1:"), ("a = 1\na = 2\n", "duplicate"), ("= 3\n", ":1:")])
    def test_parse_errors(self, text, msg):
        with pytest.raises(ExperimentConfigError, match=msg):
            parse_config_text(text)

    def test_lists_and_types(self, tmp_path):
        cfg = ExperimentConfig.load(write_cfg(tmp_path, "mode = none, outside\ndropout = 0.1, 0.3\ndata_size = 8, all\n"))
        assert cfg.mode == ("none", "outside")
        assert cfg.dropout == (0.1, 0.3)
        assert cfg.data_size == (8, "all")
        assert cfg.path("work_dir") == tmp_path / "runs"

    @pytest.mark.parametrize("extra", ["colour = red\n", "steps = many\n", "schemas = sideways\n", "documents = 0\n"])
    def test_bad_config(self, tmp_path, extra):
        with pytest.raises(ExperimentConfigError):
            ExperimentConfig.load(write_cfg(tmp_path, extra))

    def test_text_roundtrip(self):
        cfg = ExperimentConfig(mode=("none", "inside"), sigma=(0.0, 0.3))
        again = ExperimentConfig.from_dict(parse_config_text(cfg.to_text()))
        assert again == cfg


class TestGrid:
    def test_table3_has_sixteen_cells(self):
        cfg = ExperimentConfig(mode=("none", "single", "inside", "outside"), context=("context", "random", "fixed"),
                               dropout=(0.1, 0.3))
        cells = expand_grid(cfg)
        assert len(cells) == 16
        assert len({c.key() for c in cells}) == 16

    def test_modes_without_context_collapse(self):
        cells = expand_grid(ExperimentConfig(mode=("none",), context=("context", "random", "fixed")))
        assert cells == [Cell("none", None, 0.1, 0.0, two_stage=True)]

    def test_invalid_combination(self):
        with pytest.raises(ExperimentConfigError):
            expand_grid(ExperimentConfig(mode=("outside+inside",)))
        with pytest.raises(ExperimentConfigError):
            expand_grid(ExperimentConfig(mode=("outside",), context=("none",)))

    def test_fingerprint_sensitivity(self):
        cfg = ExperimentConfig()
        cell = Cell.make("outside", "random", 0.1, 0.0)
        fp = cell_fingerprint(cfg, cell, 1, "abc")
        assert fp == cell_fingerprint(ExperimentConfig(), Cell.make("outside", "random", 0.1, 0.0), 1, "abc")
        assert fp != cell_fingerprint(cfg, cell, 2, "abc")
        assert fp != cell_fingerprint(cfg, cell, 1, "abd")
        assert fp != cell_fingerprint(cfg, Cell.make("outside", "fixed", 0.1, 0.0), 1, "abc")
        assert fp != cell_fingerprint(cfg.replace(steps=5), cell, 1, "abc")
        # paths and other grid axes do not matter
        assert fp == cell_fingerprint(cfg.replace(work_dir="/elsewhere", mode=("none", "inside")), cell, 1, "abc")


def _strip_times(text):
    return re.sub(r" wall_time=\S+", "", text)


class TestRunGrid:
    def test_one_cell_then_idempotent(self, tmp_path):
        cfg = ExperimentConfig.load(write_cfg(tmp_path))
        report = run_grid(cfg, log=lambda s: None)
        assert len(report.records) == 1 and report.trained == 1 and report.failed == 0
        rec = report.records[0]
        assert rec["status"] == "ok" and rec["mode"] == "none" and rec["test_bleu_agnostic"] == "-"
        again = run_grid(cfg, log=lambda s: None)
        assert again.trained == 0
        assert len(again.records) == 1

    def test_records_are_reproducible(self, tmp_path):
        extra = "mode = none, outside\ncontext = random\nsigma = 0.0, 0.5\n"
        a = ExperimentConfig.load(write_cfg(tmp_path, extra + "work_dir = a\n"))
        b = ExperimentConfig.load(write_cfg(tmp_path, extra + "work_dir = b\n", "b.cfg"))
        ra, rb = run_grid(a, log=lambda s: None), run_grid(b, log=lambda s: None)
        assert len(ra.records) == 4
        ta = (tmp_path / "a" / "records.txt").read_text()
        tb = (tmp_path / "b" / "records.txt").read_text()
        assert _strip_times(ta) == _strip_times(tb)
        multi = [r for r in ra.records if r["mode"] == "outside"]
        assert all(r["test_bleu_agnostic"] != "-" for r in multi)

    def test_sentence_level_cells_share_the_parent(self, tmp_path):
        cfg = ExperimentConfig.load(write_cfg(tmp_path, "mode = none, outside\nsigma = 0.0, 0.3\ntwo_stage = true, false\n"))
        report = run_grid(cfg, log=lambda s: None)
        assert len(report.records) == 8
        steps = {(r["mode"], r["ts"]): r["steps"] for r in report.records}
        assert steps[("none", "true")] == steps[("outside", "true")] == str(cfg.finetune_steps)
        assert steps[("none", "false")] == str(cfg.steps + cfg.finetune_steps)
        # one cached parent per seed, plus one checkpoint per cell
        assert len(list((tmp_path / "runs" / "checkpoints").glob("*.ckpt"))) == 1 + 8

    def test_stale_corpus_is_rejected(self, tmp_path):
        run_grid(ExperimentConfig.load(write_cfg(tmp_path)), log=lambda s: None)
        with pytest.raises(ExperimentConfigError, match="documents"):
            run_grid(ExperimentConfig.load(write_cfg(tmp_path, "documents = 17\n")), log=lambda s: None)

    def test_failures_are_recorded_and_skipped(self, tmp_path, monkeypatch):
        real = E.train_cell

        def flaky(cfg, cell, *a, **k):
            if cell.mode == "single":
                raise RuntimeError("boom")
            return real(cfg, cell, *a, **k)

        monkeypatch.setattr(E, "train_cell", flaky)
        cfg_path = write_cfg(tmp_path, "mode = single, none\n")
        report = run_grid(ExperimentConfig.load(cfg_path), log=lambda s: None)
        status = {r["mode"]: r["status"] for r in report.records}
        assert status == {"single": "failed", "none": "ok"}
        assert "boom" in [r for r in report.records if r["mode"] == "single"][0]["error"]
        assert cli.main(["run-grid", "--config", str(cfg_path)]) == 1


class TestReports:
    def test_empty_table3_is_all_absent(self):
        text = format_report(ExperimentReport(), "table3")
        rows = text.strip().splitlines()[3:]
        assert len(rows) == 8
        cells = [c for r in rows for c in r.split()[-2:]]
        assert cells == ["-"] * 16
        assert "p=0.1" in text and "p=0.3" in text

    def test_table4_layout(self):
        text = format_report(ExperimentReport(), "table4")
        lines = text.strip().splitlines()
        assert lines[1].split() == ["System", "Inside", "Aware", "Inside", "Agnostic", "Outside", "Aware", "Outside",
                                    "Agnostic"]
        assert [l.split()[0] for l in lines[3:]] == ["Context", "Random", "Fixed"]

    def test_figure2_layout(self):
        lines = format_report(ExperimentReport(), "figure2").strip().splitlines()
        assert lines[1].split() == ["Documents", "Base", "Inside", "Gaussian"]
        assert [l.split()[0] for l in lines[3:]] == ["500", "1000", "2000", "4000"]

    def test_table2_and_table5_rows(self):
        t2 = format_report(ExperimentReport(), "table2")
        assert len(t2.strip().splitlines()) == 3 + 5
        t5 = format_report(ExperimentReport(), "table5")
        assert [l.split()[0] for l in t5.strip().splitlines()[3:]] == ["Baseline", "Context", "Noise", "Context+Noise"]

    def test_unknown_shape(self):
        with pytest.raises(ExperimentConfigError):
            format_report(ExperimentReport(), "table9")

    def test_aggregation_over_seeds(self, tmp_path):
        lines = [
            "fingerprint=a mode=none context=- dropout=0.1 sigma=0.0 data=all layers=- ws=- ts=- seed=1 status=ok test_bleu_aware=10.0",
            "fingerprint=b mode=none context=- dropout=0.1 sigma=0.0 data=all layers=- ws=- ts=- seed=2 status=ok test_bleu_aware=14.0",
            "fingerprint=c mode=none context=- dropout=0.1 sigma=0.0 data=all layers=- ws=- ts=- seed=3 status=failed",
        ]
        (tmp_path / "r.txt").write_text("\n".join(lines) + "\n")
        report = ExperimentReport.load(tmp_path / "r.txt")
        agg = report.find("test_bleu_aware", mode="none", dropout=0.1)
        assert (agg.mean, agg.n) == (12.0, 2)
        assert agg.stdev == pytest.approx(2 ** 0.5 * 2)
        out, rec = emit_report(report, "table3", tmp_path / "t3.txt")
        assert "12.00±2.83" in out.read_text()
        assert rec.read_text().count("\n") == 3


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A corpus plus sentence-level and fine-tuned model directories made through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "exp.cfg"
    cfg.write_text(TINY, encoding="utf-8")
    assert cli.main(["gen-corpus", "--config", str(cfg)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--stage", "sentence", "--out", str(root / "s1")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--stage", "finetune", "--mode", "outside", "--context", "random",
                     "--init", str(root / "s1"), "--out", str(root / "s2")]) == 0
    return root, cfg


class TestCli:
    def test_train_outputs(self, trained):
        root, _ = trained
        for d in ("s1", "s2"):
            assert {"model.ckpt", "train.log", "src.bpe", "src.vocab", "tgt.bpe", "tgt.vocab"} <= {
                p.name for p in (root / d).iterdir()}
        assert (root / "s1" / "train.log").read_text().startswith("step=0 ")

    def test_agnostic_translation_ignores_context_file(self, trained, tmp_path):
        root, _ = trained
        src = root / "corpus" / "test.txt"
        n = sum(1 for l in src.read_text().splitlines() if l.strip())
        outs = []
        for i, ctx_line in enumerate(["ka ka ka", "zzz", ""]):
            ctx = tmp_path / f"ctx{i}.txt"
            ctx.write_text((ctx_line + "\n") * n)
            out = tmp_path / f"hyp{i}.txt"
            assert cli.main(["translate", "--checkpoint", str(root / "s2"), "--input", str(src), "--schema", "agnostic",
                             "--context-file", str(ctx), "--out", str(out)]) == 0
            outs.append(out.read_text())
        assert outs[0] == outs[1] == outs[2]
        assert outs[0].count("\n") == n

    def test_evaluate(self, trained, tmp_path, capsys):
        root, _ = trained
        out = tmp_path / "bleu.txt"
        assert cli.main(["evaluate", "--checkpoint", str(root / "s1"), "--input", str(root / "corpus" / "test.txt"),
                         "--beam", "2", "--out", str(out)]) == 0
        assert capsys.readouterr().out.startswith("BLEU = ")
        assert out.read_text().startswith("bleu=")

    def test_learn_bpe(self, trained, tmp_path):
        root, _ = trained
        assert cli.main(["learn-bpe", "--input", str(root / "corpus" / "train.txt"), "--merges", "5",
                         "--out", str(tmp_path)]) == 0
        assert (tmp_path / "src.bpe").read_text().startswith("bpe-merges 5\n")

    def test_run_grid_then_report(self, tmp_path):
        cfg = write_cfg(tmp_path, "mode = none, single, inside, outside\ncontext = context, random, fixed\n"
                                  "dropout = 0.1, 0.3\nsteps = 2\nfinetune_steps = 1\ntest_documents = 1\n")
        assert cli.main(["run-grid", "--config", str(cfg)]) == 0
        assert cli.main(["run-grid", "--config", str(cfg)]) == 0
        records = (tmp_path / "runs" / "records.txt").read_text().splitlines()
        assert len(records) == 16
        assert cli.main(["report", "--config", str(cfg), "--shape", "table3", "--out", str(tmp_path / "t3.txt")]) == 0
        rows = (tmp_path / "t3.txt").read_text().strip().splitlines()[3:]
        assert len(rows) == 8
        assert not any(c == "-" for r in rows for c in r.split()[-2:])

    def test_seed_override(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert cli.main(["run-grid", "--config", str(cfg), "--seed", "7"]) == 0
        assert "seed=7" in (tmp_path / "runs" / "records.txt").read_text()

    @pytest.mark.parametrize(
        "argv",
        [["train", "--stage", "later"], ["frobnicate"], ["report", "--shape", "table9"], ["translate", "--beam", "x"]],
    )
    def test_usage_errors_exit_2(self, argv):
        with pytest.raises(SystemExit) as e:
            cli.main(argv)
        assert e.value.code == 2

    def test_missing_required_flag_exits_2(self, tmp_path):
        assert cli.main(["train", "--config", str(write_cfg(tmp_path))]) == 2
        assert cli.main(["train", "--stage", "finetune", "--out", str(tmp_path / "m")]) == 2

    def test_runtime_failure_exits_1(self, tmp_path):
        assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "nothing"), "--input", str(tmp_path / "x")]) == 1
