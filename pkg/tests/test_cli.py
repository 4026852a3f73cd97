import json
from pathlib import Path

import numpy as np
import pytest
from jsonschema import validate

import rdm.cli as cli
from rdm.codecs import CodecSpec
from rdm.loader import load_episode
from rdm.recorder import Recorder, TranscodePlan, transcode

SCHEMAS = Path(cli.__file__).parent / "schemas"


def schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


def run_json(capsys, *argv):
    code, out = run(capsys, *argv, "--json")
    return code, json.loads(out)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = cli.main(["gen", str(root / "raw"), "--episodes", "4", "--frames", "40",
                     "--width", "32", "--height", "32", "--seed", "7"])
    assert code == 0
    return root


def test_gen_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, _ = run(capsys, "gen", tmp_path / name, "--episodes", 2,
                      "--frames", 10, "--width", 16, "--height", 16, "--seed", 5)
        assert code == 0
    for episode in ("episode_000.rdm", "episode_001.rdm"):
        assert (tmp_path / "a" / episode).read_bytes() == (tmp_path / "b" / episode).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    validate(manifest, schema("dataset_manifest"))
    assert manifest["seed"] == 5


def test_gen_zero_episodes(tmp_path, capsys):
    code, _ = run(capsys, "gen", tmp_path / "none", "--episodes", 0)
    assert code == 0
    manifest = json.loads((tmp_path / "none" / "manifest.json").read_text())
    assert manifest["episodes"] == []


def test_gen_invalid_resolution(tmp_path, capsys):
    code = cli.main(["gen", str(tmp_path / "x"), "--episodes", "1", "--width", "0"])
    assert code == 2


def test_convert_and_verify_round_trip(dataset, capsys):
    code, report = run_json(capsys, "convert", dataset / "raw", dataset / "dumps")
    assert code == 0
    validate(report, schema("convert"))
    manifest = json.loads(
        (dataset / "dumps" / "episode_000" / "manifest.json").read_text()
    )
    validate(manifest, schema("dump_manifest"))

    code, report = run_json(capsys, "transcode", dataset / "raw", dataset / "ll",
                            "--vision-codec", "delta_ll")
    assert code == 0
    validate(report, schema("transcode"))

    code, report = run_json(capsys, "verify", dataset / "ll",
                            "--reference", dataset / "dumps")
    assert code == 0
    validate(report, schema("verify"))
    assert report["pass"] is True

    # dump -> container -> content identical
    code, report = run_json(capsys, "convert", dataset / "dumps" / "episode_000",
                            dataset / "back.rdm")
    assert code == 0
    a = load_episode(dataset / "raw" / "episode_000.rdm")
    b = load_episode(dataset / "back.rdm")
    for name in a.streams:
        if a.streams[name].dtype == "utf8":
            assert a.streams[name].frames == b.streams[name].frames
        else:
            np.testing.assert_array_equal(a.streams[name].frames, b.streams[name].frames)


def test_lossy_dump_flagged(dataset, capsys):
    code, _ = run(capsys, "transcode", dataset / "raw" / "episode_000.rdm",
                  dataset / "lossy.rdm", "--vision-codec", "delta_q",
                  "--quant-step", 8)
    assert code == 0
    code, _ = run(capsys, "convert", dataset / "lossy.rdm", dataset / "lossy_dump")
    assert code == 0
    manifest = json.loads((dataset / "lossy_dump" / "manifest.json").read_text())
    assert manifest["lossy"] is True


def test_transcode_idempotent_on_matching_file(dataset, capsys):
    code, _ = run(capsys, "transcode", dataset / "lossy.rdm", dataset / "lossy2.rdm",
                  "--vision-codec", "delta_q", "--quant-step", 8)
    assert code == 0
    a = load_episode(dataset / "lossy.rdm")
    b = load_episode(dataset / "lossy2.rdm")
    np.testing.assert_array_equal(a.streams["cam0"].frames, b.streams["cam0"].frames)


def test_transcode_quant_step_one_rejected(dataset, capsys):
    code = cli.main(["transcode", str(dataset / "raw"), str(dataset / "nope"),
                     "--vision-codec", "delta_q", "--quant-step", "1"])
    assert code == 2


def test_inspect(dataset, capsys):
    code, report = run_json(capsys, "inspect", dataset / "ll" / "episode_000.rdm")
    assert code == 0
    validate(report, schema("inspect"))
    assert report["raw"] is False
    cam = next(s for s in report["streams"] if s["name"] == "cam0")
    assert cam["packets"] == 40
    assert cam["keyframes"] == 4  # 40 frames at K=10
    code, report = run_json(capsys, "inspect", dataset / "raw" / "episode_000.rdm")
    assert report["raw"] is True


def test_inspect_corrupt_file(tmp_path, capsys):
    junk = tmp_path / "junk.rdm"
    junk.write_bytes(b"\x00" * 32)
    assert cli.main(["inspect", str(junk)]) == 2


def test_verify_lossy_bounds(dataset, tmp_path, capsys):
    # adversarial frame: value 2 quantizes to 4 under q=4, error exactly 2
    raw = tmp_path / "adv.raw.rdm"
    rec = Recorder(raw)
    rec.add("cam0", np.full((2, 2, 3), 2, dtype=np.uint8), timestamp_ns=0)
    rec.add("cam0", np.full((2, 2, 3), 9, dtype=np.uint8), timestamp_ns=1)
    rec.close()
    lossy = tmp_path / "adv.rdm"
    transcode(raw, lossy, TranscodePlan({"vision": CodecSpec("delta_q", quant_step=4)}))
    code, _ = run(capsys, "convert", raw, tmp_path / "adv_dump")
    assert code == 0
    code, _ = run(capsys, "verify", lossy, "--reference", tmp_path / "adv_dump",
                  "--max-abs-error", 2)
    assert code == 0
    code, _ = run(capsys, "verify", lossy, "--reference", tmp_path / "adv_dump",
                  "--max-abs-error", 1)
    assert code == 1


def test_bench_report(dataset, tmp_path, capsys):
    code, report = run_json(
        capsys, "bench", dataset / "ll", "--batches", 6, "--batch-size", 2,
        "--concurrency", 2, "--cold", "--prefetch", 4,
        "--cache-dir", tmp_path / "cache", "--csv", tmp_path / "lat.csv",
    )
    assert code == 0
    validate(report, schema("bench"))
    assert len(report["latency_ms"]) == 6
    expected = report["batch_size"] * report["batches"] / report["total_seconds"]
    assert report["throughput_eps"] == pytest.approx(expected)
    lines = (tmp_path / "lat.csv").read_text().strip().splitlines()
    assert lines[0] == "batch_index,latency_ms"
    assert len(lines) == 7


def test_bench_determinism_across_concurrency(dataset, tmp_path, capsys):
    digests = []
    for concurrency in (1, 4):
        code, report = run_json(
            capsys, "bench", dataset / "ll", "--batches", 4, "--batch-size", 2,
            "--concurrency", concurrency, "--no-cache", "--prefetch", 0,
        )
        assert code == 0
        digests.append(report["content_digest"])
    assert digests[0] == digests[1]


def test_stats_examples(dataset, capsys, tmp_path):
    # Table-style ratio formatting on the documented sizes
    big = tmp_path / "big.bin"
    small = tmp_path / "small.bin"
    big.write_bytes(b"\x00" * 38749)
    small.write_bytes(b"\x00" * 531)
    code, report = run_json(capsys, "stats", f"rlds={big}", f"ours={small}",
                            "--baseline", "rlds")
    assert code == 0
    validate(report, schema("stats"))
    assert report["ratio_labels"]["ours"] == "73x"
    assert report["ratio_labels"]["rlds"] == "1.0x"

    code, report = run_json(capsys, "stats", f"a={big}", f"b={big}")
    assert report["ratio_vs_baseline"]["b"] == 1.0


def test_stats_zero_bytes(tmp_path, capsys):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    full = tmp_path / "full.bin"
    full.write_bytes(b"x")
    assert cli.main(["stats", f"a={full}", f"b={empty}"]) == 2


def test_ratio_formatting():
    assert cli.format_ratio(72.97) == "73x"
    assert cli.format_ratio(1.43) == "1.4x"
    assert cli.format_ratio(3.0) == "3.0x"
    assert cli.format_ratio(147.2) == "147x"
