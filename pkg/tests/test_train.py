import gzip
import json
import math
import pathlib
import struct

import numpy as np
import pytest

from relaxq.autodiff import Tensor
from relaxq.cli import main
from relaxq.train import (
    FORMAT_TAG,
    CheckpointError,
    Dataset,
    IdxFormatError,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    derive_seed,
    evaluate,
    load_checkpoint,
    load_config,
    load_idx,
    load_model,
    load_splits,
    make_synthetic,
    parse_config,
    read_idx,
    round_posthoc,
    save_checkpoint,
    save_model,
    scale_pixels,
)

CONFIGS = pathlib.Path(__file__).resolve().parents[1] / "configs"
SYNTH = CONFIGS / "synthetic.ini"


def synth_config(**kw):
    base = dict(epochs=3, anneal_epochs=1, synthetic_n=600, val_size=100, batch_size=32)
    base.update(kw)
    return load_config(SYNTH).with_overrides(**base)


def trainer_for(config, out_dir=None):
    train, val, _ = load_splits(config)
    return Trainer(config, train, val, out_dir=out_dir)


def write_idx(path, magic, dims, body):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + bytes(body))


# data


def test_pixel_scaling():
    out = scale_pixels(np.array([0, 255, 128], dtype=np.uint8), np.float64)
    assert out[0] == -1.0 and out[1] == 1.0
    assert out[2] == pytest.approx(0.00392, abs=1e-5)


def test_idx_round_trip(tmp_path):
    pixels = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "img.gz", 0x803, (2, 3, 4), pixels.tobytes())
    write_idx(tmp_path / "lab", 0x801, (2,), [7, 1])
    assert np.array_equal(read_idx(tmp_path / "img.gz"), pixels)
    ds = load_idx(tmp_path / "img.gz", tmp_path / "lab")
    assert ds.images.shape == (2, 1, 3, 4)
    assert ds.labels.tolist() == [7, 1]


def test_idx_bad_magic(tmp_path):
    write_idx(tmp_path / "f", 0x1234, (1,), [0])
    with pytest.raises(IdxFormatError, match="magic"):
        read_idx(tmp_path / "f")


def test_idx_header_only(tmp_path):
    write_idx(tmp_path / "f", 0x803, (5, 28, 28), [])
    with pytest.raises(IdxFormatError, match="declares"):
        read_idx(tmp_path / "f")
    (tmp_path / "g").write_bytes(b"\x00\x00")
    with pytest.raises(IdxFormatError, match="truncated"):
        read_idx(tmp_path / "g")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "img", 0x803, (2, 1, 1), [0, 1])
    write_idx(tmp_path / "lab", 0x801, (3,), [0, 1, 2])
    with pytest.raises(IdxFormatError, match="count"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_missing_mnist_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_splits(load_config(CONFIGS / "mlp.ini").with_overrides(data_dir=str(tmp_path)))


def test_synthetic_is_deterministic_and_separable():
    a, b = make_synthetic(4, 300, seed=3), make_synthetic(4, 300, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert np.abs(a.images).max() <= 1.0
    assert not np.array_equal(a.images, make_synthetic(4, 300, seed=4).images)
    with pytest.raises(ValueError, match="positive"):
        make_synthetic(4, 0, seed=0)


def test_split_tail():
    ds = Dataset(np.arange(10.0)[:, None], np.zeros(10, dtype=np.int64))
    train, val = ds.split_tail(3)
    assert val.images[:, 0].tolist() == [7, 8, 9] and val.split == "val"
    assert len(train) == 7
    with pytest.raises(ValueError):
        ds.split_tail(10)


def test_full_precision_fits_synthetic():
    config = synth_config(mode="identity", epochs=5, anneal_epochs=0)
    trainer = trainer_for(config)
    trainer.run()
    assert evaluate(trainer.model, trainer.train_ds, "eval_hard").error == 0.0


# config


def test_parse_config_and_overrides():
    config = parse_config("""
[model]
input_shape = 1, 4, 4
bits_w = 4
bits_a = none
delta = auto
[train]
epochs = 2
anneal_epochs = 0
lr = 1e-2
[layer.1]
type = dense
units = 3
activation = none
[layer.0]
type = flatten
""")
    assert config.model.input_shape == (1, 4, 4)
    assert config.model.bits_a is None
    assert [d["type"] for d in config.model.layers] == ["flatten", "dense"]
    assert config.lr == 0.01 and config.batch_size == 128
    again = config.with_overrides(bits_w=2, seed=9, lr=None)
    assert again.model.bits_w == 2 and again.seed == 9 and again.lr == 0.01
    with pytest.raises(KeyError):
        config.with_overrides(colour="red")


@pytest.mark.parametrize("text,match", [
    ("[train]\nepochs = 1\n", "model"),
    ("[model]\ninput_shape = 2\n", "layer"),
    ("[model]\ninput_shape = 2\nwidth = 3\n[layer.0]\ntype = dense\nunits = 2\n", "unknown"),
    ("[model]\ninput_shape = 2\n[layer.0]\ntype = dense\nunits = 2\n[train]\nepochs = 0\n", "epochs"),
    ("[model]\ninput_shape = 2\n[layer.0]\ntype = dense\nunits = 2\n[extra]\n", "unknown section"),
])
def test_config_errors(text, match):
    with pytest.raises(ValueError, match=match):
        parse_config(text)


def test_shipped_configs_load():
    for path in CONFIGS.glob("*.ini"):
        assert load_config(path).model.layers


# training loop


def test_training_is_deterministic():
    a = trainer_for(synth_config()).run()
    b = trainer_for(synth_config()).run()
    assert a == b
    c = trainer_for(synth_config(seed=1)).run()
    assert a != c


def test_identity_quantizers_reproduce_plain_training():
    quantized = trainer_for(synth_config(mode="identity")).run()
    d = synth_config().to_dict()
    d["model"].update(bits_w=None, bits_a=None)
    plain = trainer_for(TrainConfig.from_dict(d)).run()
    keys = ["train_loss", "val_loss", "val_err_hard"]
    assert [[row[k] for k in keys] for row in quantized] == [[row[k] for k in keys] for row in plain]


def test_lr_schedule():
    trainer = trainer_for(synth_config(epochs=4, anneal_epochs=2))
    spe = trainer.steps_per_epoch
    assert trainer.lr_at(0) == trainer.lr_at(2 * spe - 1) == 0.01
    assert trainer.lr_at(2 * spe) == pytest.approx(0.01)
    assert trainer.lr_at(3 * spe) == pytest.approx(0.005)
    assert trainer.lr_at(4 * spe - 1) == pytest.approx(0.01 / (2 * spe))
    assert trainer_for(synth_config(anneal_epochs=0)).lr_at(10**6) == 0.01


def test_resume_matches_uninterrupted_run(tmp_path):
    full = trainer_for(synth_config(epochs=3))
    full_log = full.run()
    # stop after one epoch (annealing only starts in epoch 3), then resume from disk
    first = trainer_for(synth_config(epochs=3), out_dir=str(tmp_path))
    first.config = first.config.with_overrides(epochs=1, anneal_epochs=0)
    first.run()
    arrays, meta = load_checkpoint(tmp_path / "last.ckpt.npz")
    meta["config"] = synth_config(epochs=3).to_dict()
    save_checkpoint(tmp_path / "last.ckpt.npz", arrays, meta)
    train, val, _ = load_splits(synth_config())
    resumed = Trainer.resume(tmp_path / "last.ckpt.npz", train, val)
    log = resumed.run()
    assert log[1:] == full_log[1:]
    state = resumed.model.state_dict()
    assert all(np.array_equal(state[k], v) for k, v in full.model.state_dict().items())


def test_checkpoint_format(tmp_path):
    path = tmp_path / "x.npz"
    save_checkpoint(path, {"a": np.arange(3.0)}, {"kind": "model", "v": np.float64(1.5)})
    arrays, meta = load_checkpoint(path)
    assert np.array_equal(arrays["a"], [0, 1, 2]) and meta["v"] == 1.5
    assert meta["format"] == FORMAT_TAG
    np.savez(tmp_path / "plain.npz", a=np.ones(2))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "plain.npz")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")


def test_model_checkpoint_round_trip(tmp_path):
    config = synth_config(epochs=1, anneal_epochs=0)
    trainer = trainer_for(config)
    trainer.run()
    save_model(tmp_path / "m.npz", trainer.model, config)
    model, loaded = load_model(tmp_path / "m.npz")
    assert loaded == config
    x = trainer.val_ds.images
    assert np.array_equal(model.forward(x, "eval_hard").data, trainer.model.forward(x, "eval_hard").data)


def test_divergence_reports_last_good_checkpoint(tmp_path):
    trainer = trainer_for(synth_config(mode="identity", epochs=2, anneal_epochs=0), out_dir=str(tmp_path))
    trainer.config = trainer.config.with_overrides(epochs=1)
    trainer.run()
    trainer.config = trainer.config.with_overrides(epochs=2)
    trainer.train_ds.images[5, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        trainer.run()
    assert info.value.epoch == 2
    assert info.value.checkpoint == str(tmp_path / "last.ckpt.npz")
    _, meta = load_checkpoint(info.value.checkpoint)
    assert meta["epoch"] == 1 and meta["kind"] == "training"


def test_early_stopping_keeps_best():
    trainer = trainer_for(synth_config(epochs=6, anneal_epochs=0, lr=0.3, patience=1))
    log = trainer.run()
    assert len(log) == 6 or len(log) == trainer.best_epoch + 1
    best = min(row["val_loss"] for row in log)
    assert trainer.best_val_loss == best <= log[-1]["val_loss"]
    assert log[trainer.best_epoch - 1]["val_loss"] == best
    trainer.restore_best()
    state = trainer.model.state_dict()
    assert all(np.array_equal(state[k], v) for k, v in trainer.best_state.items())


def test_derive_seed_independent_streams():
    assert derive_seed(0, 1) == derive_seed(0, 1)
    assert len({derive_seed(0, k) for k in range(10)}) == 10


def test_round_posthoc_puts_weights_on_grid():
    config = synth_config(mode="identity", epochs=2, anneal_epochs=0)
    trainer = trainer_for(config)
    trainer.run()
    rounded, new_config = round_posthoc(trainer.model, config, 4, 4, trainer.train_ds)
    assert new_config.model.bits_w == 4 and new_config.model.mode == "hard"
    from relaxq.quant import grid_points, hard_quantize

    for layer in rounded.compute_layers():
        q = layer.weight_quantizer
        w = hard_quantize(layer.weight.data, q.grid).data
        assert np.isin(w, grid_points(q.grid).data).all()
    err = evaluate(rounded, trainer.val_ds, "eval_hard").error
    assert math.isfinite(err)
    original = trainer.model.layers[0].weight.data
    assert np.array_equal(rounded.layers[0].weight.data, original)


# command line


def test_cli_train_eval_quantize_report(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(SYNTH), "--epochs", "1", "--anneal-epochs", "0", "--out", str(out),
                 "--quiet"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert 0 <= summary["test_err_hard"] <= 1
    assert (out / "log.csv").exists() and (out / "last.ckpt.npz").exists()
    capsys.readouterr()
    ckpt = str(out / "model.ckpt.npz")
    assert main(["eval", "--checkpoint", ckpt, "--phase", "relaxed", "--seeds", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["phase"] == "relaxed"
    assert main(["quantize", "--checkpoint", ckpt, "--bits-w", "8", "--bits-a", "8"]) == 0
    assert "degradation" in json.loads(capsys.readouterr().out)
    assert main(["report", "--checkpoint", ckpt, "--layer-bits", "layer0=8/8"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["bops"]["layers"][0]["bits_w"] == 8
    assert main(["report", "--checkpoint", ckpt, "--format", "csv", "--out", str(tmp_path / "r.csv")]) == 0
    assert (tmp_path / "r.csv").read_text().startswith("layer,")


def test_cli_errors(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.npz")]) == 1
    assert "relaxq eval" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train"])


def test_tensor_inputs_accepted():
    model = trainer_for(synth_config()).model
    model.init_quantizers(np.zeros((4, 2)) + np.arange(4)[:, None] * 0.1)
    assert model.forward(Tensor(np.zeros((3, 2))), "eval_hard").shape == (3, 4)
