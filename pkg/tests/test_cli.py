import csv
import json

import pytest

from clops.cli import main
from clops.store import import_store

RUN = """
seed = 0
[data.synthetic]
n_series = 12
length = 300
seed = 0
[data]
frac = 0.5
[model]
size = "tiny"
L = 24
H = 6
lags = [1, 2, 12]
layers = 1
d_model = 32
d_ff = 64
n_heads = 2
d_kv = 16
[train]
iterations = 4
batch_size = 4
warmup_steps = 1
eval_every = 4
max_val_series = 4
[eval]
windows = 2
n_samples = 0
"""


@pytest.fixture()
def run_toml(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(RUN)
    return path


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_synth_split_round_trip(tmp_path):
    store = tmp_path / "s.jsonl.gz"
    assert main(["synth", "--n-series", "20", "--length", "700", "--seed", "1", "--out", str(store)]) == 0
    assert len(import_store(store)) == 20
    assert main(["split", "--store", str(store), "--frac", "0.5", "--out", str(tmp_path / "sp")]) == 0
    doc = json.loads((tmp_path / "sp/split.json").read_text())
    assert doc["pretrain_series"] + doc["traintest_series"] == 20
    assert not set(doc["pretrain_attrs"]) & set(doc["traintest_attrs"])


def test_ingest_csv(tmp_path):
    trace = tmp_path / "t.csv"
    lines = ["timestamp,vm_id,subscription_id,min_cpu,max_cpu,avg_cpu,vm_virtual_core_count,vm_memory,deployment_size"]
    lines += [f"{300 * i},vm1,sub1,1,3,{2 + i % 5},2,4,1" for i in range(700)]
    trace.write_text("\n".join(lines) + "\n")
    out = tmp_path / "a.jsonl.gz"
    assert main(["ingest", "--trace", str(trace), "--kind", "azure2017", "--out", str(out)]) == 0
    assert len(import_store(out)) == 1


def test_evaluate_naive_writes_metrics(run_toml, tmp_path):
    assert main(["evaluate", "--config", str(run_toml), "--checkpoint", "naive", "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "metrics.csv")
    assert {"smape", "crps", "config_hash"} <= set(table[0])
    assert table[-1]["row_type"] == "summary"
    assert not list(tmp_path.glob("*.tmp"))


def test_evaluate_is_reproducible(run_toml, tmp_path):
    for d in ("a", "b"):
        main(["evaluate", "--config", str(run_toml), "--out", str(tmp_path / d)])
    assert (tmp_path / "a/metrics.csv").read_text() == (tmp_path / "b/metrics.csv").read_text()


def test_pretrain_adapt_evaluate(run_toml, tmp_path):
    assert main(["pretrain", "--config", str(run_toml), "--out", str(tmp_path / "pre")]) == 0
    ckpt = tmp_path / "pre/final.clops"
    assert main(["adapt", "--config", str(run_toml), "--mode", "zero_shot", "--checkpoint", str(ckpt),
                 "--out", str(tmp_path / "zs")]) == 0
    assert main(["evaluate", "--config", str(run_toml), "--checkpoint", str(tmp_path / "zs/adapted.clops"),
                 "--out", str(tmp_path / "ev")]) == 0
    assert float(rows(tmp_path / "ev/metrics.csv")[-1]["smape"]) >= 0


def test_ablate_pe_rows(run_toml, tmp_path):
    assert main(["ablate", "--config", str(run_toml), "--axis", "pe", "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "ablate_pe.csv")
    assert sorted(r["value"] for r in table) == ["datetime_only", "learned", "rope", "sinusoidal"]


def test_scaling_grid(run_toml, tmp_path):
    assert main(["scaling", "--config", str(run_toml), "--sizes", "tiny,small", "--fracs", "0.1,1.0",
                 "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "scaling.csv")
    assert [(r["size"], float(r["frac"])) for r in table] == [("tiny", 0.1), ("tiny", 1.0), ("small", 0.1),
                                                                ("small", 1.0)]
    assert int(table[0]["observations"]) < int(table[1]["observations"])


@pytest.mark.parametrize("override", ["model.pe=fourier", "train.iterations=-3", "eval.windows=zero"])
def test_bad_config_exit_2(run_toml, tmp_path, override, capsys):
    code = main(["evaluate", "--config", str(run_toml), "--override", override, "--out", str(tmp_path)])
    assert code == 2
    assert "invalid configuration" in capsys.readouterr().err


def test_missing_config_file_exit_2(tmp_path):
    assert main(["pretrain", "--config", str(tmp_path / "none.toml")]) == 2


def test_missing_checkpoint_exit_1(run_toml, tmp_path):
    assert main(["evaluate", "--config", str(run_toml), "--checkpoint", str(tmp_path / "gone.clops"),
                 "--out", str(tmp_path)]) == 1


def test_unknown_command_exit_2():
    assert main(["teleport"]) == 2
