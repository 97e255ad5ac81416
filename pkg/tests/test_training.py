import numpy as np
import pytest

from bitmotor.training import (
    Adam,
    DcaeNet,
    DivergenceError,
    TrainConfig,
    dcae_loss,
    extract_features,
    format_train_config,
    parse_train_config,
    train_dcae,
    write_loss_curve,
)

MICRO = dict(input_size=16, channels=(8, 16), fc1_out=64, feature_dim=64,
             epochs=5, batch_size=10, seed=0)


def micro_cfg(mode="partial", **kw):
    args = dict(MICRO)
    args.update(kw)
    return TrainConfig(mode=mode, size="desk", **args)


def micro_images(n=20, size=16, seed=0):
    rng = np.random.default_rng(seed)
    imgs = np.full((n, size, size, 3), 128, np.uint8)
    for i in range(n):
        y, x = rng.integers(2, size - 6, 2)
        imgs[i, y : y + 4, x : x + 4] = rng.integers(0, 256, 3)
    return imgs


class TestDcaeLoss:
    def test_equal_is_zero(self):
        x = np.random.default_rng(0).random((4, 4, 3)).astype(np.float32)
        assert dcae_loss(x, x) == 0.0

    def test_uniform_offset(self):
        x = np.zeros((5, 5, 3), np.float32)
        assert dcae_loss(x, x + 0.1) == pytest.approx(0.01, abs=1e-7)

    def test_matches_two_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.random((6, 7)).astype(np.float32)
        b = rng.random((6, 7)).astype(np.float32)
        acc, count = 0.0, 0
        for i in range(6):
            for j in range(7):
                acc += (float(a[i, j]) - float(b[i, j])) ** 2
                count += 1
        assert dcae_loss(a, b) == pytest.approx(acc / count, rel=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dcae_loss(np.zeros((2, 2)), np.zeros((3, 2)))


def _loss_fn(net, batch):
    recon, _ = net.forward_train(batch, update_running=False)
    return float(np.mean((recon - batch).astype(np.float64) ** 2))


def _analytic_grads(net, batch):
    recon, tape = net.forward_train(batch, update_running=False)
    diff = recon - batch
    drecon = (2.0 / diff.size) * diff
    return net.backward(tape, drecon.astype(np.float32))


def _fd_check(net, batch, names, rng, samples=8, h=1e-3, tol=1e-3):
    grads = _analytic_grads(net, batch)
    worst = 0.0
    for name in names:
        arr = net.params[name]
        g = grads[name]
        flat = np.abs(g).ravel()
        big = np.flatnonzero(flat > max(3e-4, 0.01 * flat.max()))
        if big.size == 0:
            continue
        for idx in rng.choice(big, size=min(samples, big.size), replace=False):
            ij = np.unravel_index(idx, arr.shape)
            old = arr[ij]
            arr[ij] = old + h
            lp = _loss_fn(net, batch)
            arr[ij] = old - h
            lm = _loss_fn(net, batch)
            arr[ij] = old
            num = (lp - lm) / (2 * h)
            ana = float(g[ij])
            rel = abs(ana - num) / max(abs(ana), abs(num))
            worst = max(worst, rel)
    assert worst < tol, f"finite-difference mismatch: worst rel err {worst:.2e}"
    return worst


class TestGradients:
    def test_full_mode_finite_differences(self):
        cfg = micro_cfg("full", batch_size=4)
        net = DcaeNet(cfg)
        batch = micro_images(4).astype(np.float32) / 255.0
        rng = np.random.default_rng(2)
        names = [k for k in net.params if k.endswith(("_w", "_b", "_gamma", "_beta"))]
        _fd_check(net, batch, names, rng)

    def test_partial_mode_decoder_finite_differences(self):
        cfg = micro_cfg("partial", batch_size=4)
        net = DcaeNet(cfg)
        batch = micro_images(4, seed=3).astype(np.float32) / 255.0
        rng = np.random.default_rng(4)
        names = [k for k in net.params if k.startswith("dec_")]
        _fd_check(net, batch, names, rng)

    def test_saturated_binarization_blocks_gradient(self):
        # push conv1's BN output to |z| >= 1 everywhere: STE mask must zero
        # every gradient upstream of that sign node
        net = DcaeNet(micro_cfg("partial", batch_size=4))
        net.params["enc_conv1_gamma"][:] = 0.001
        net.params["enc_conv1_beta"][:] = 10.0
        batch = micro_images(4, seed=5).astype(np.float32) / 255.0
        grads = _analytic_grads(net, batch)
        assert np.all(grads["enc_conv1_w"] == 0.0)
        assert np.all(grads["enc_conv1_gamma"] == 0.0)
        assert np.all(grads["enc_conv1_beta"] == 0.0)

    def test_zero_loss_gradient_zeroes_everything(self):
        net = DcaeNet(micro_cfg("partial", batch_size=2))
        batch = micro_images(2, seed=6).astype(np.float32) / 255.0
        _, tape = net.forward_train(batch, update_running=False)
        grads = net.backward(tape, np.zeros((2, 16, 16, 3), np.float32))
        assert all(np.all(g == 0) for g in grads.values())

    def test_ste_mask_positions_are_exact(self):
        # encoder gradients vanish exactly where |pre-binarization| >= 1
        net = DcaeNet(micro_cfg("partial", batch_size=3))
        batch = micro_images(3, seed=7).astype(np.float32) / 255.0
        recon, tape = net.forward_train(batch, update_running=False)
        drecon = np.ones_like(recon) / recon.size
        # walk the tape: every encoder entry's activation cache is the BN
        # output; re-run backward and verify the fc2 sign node mask directly
        entry = next(e for e in tape if e["spec"].name == "enc_fc2")
        z = entry["act"]
        mask = np.abs(z) < 1.0
        # inject a synthetic gradient at the feature output by zeroing the
        # decoder's contribution: compare against manual STE application
        g = np.ones_like(z)
        from bitmotor.core import ste_backward

        out = ste_backward(z, g)
        assert np.array_equal(out != 0, mask)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = {"w": np.ones((3, 3), np.float32)}
        opt = Adam(params, lr=0.1)
        opt.step(params, {"w": np.zeros((3, 3), np.float32)})
        assert np.array_equal(params["w"], np.ones((3, 3)))

    def test_descent_direction(self):
        params = {"w": np.zeros(4, np.float32)}
        opt = Adam(params, lr=0.01)
        for _ in range(50):
            opt.step(params, {"w": np.full(4, 2.0, np.float32)})
        assert np.all(params["w"] < 0)

    def test_shadow_clipping(self):
        params = {"w": np.zeros(4, np.float32)}
        opt = Adam(params, lr=1.0, clip_names=("w",))
        for _ in range(10):
            opt.step(params, {"w": np.full(4, -1.0, np.float32)})
        assert np.all(params["w"] <= 1.0)

    def test_shape_mismatch(self):
        params = {"w": np.zeros(4, np.float32)}
        opt = Adam(params)
        with pytest.raises(ValueError):
            opt.step(params, {"w": np.zeros(5, np.float32)})


class TestTrainDcae:
    def test_overfit_smoke_partial(self):
        imgs = micro_images(20)
        cfg = micro_cfg("partial", epochs=200, batch_size=10, learning_rate=2e-3)
        result = train_dcae(imgs, cfg)
        first = result.curve[0][1]
        last = result.curve[-1][1]
        assert last < 0.25 * first, (first, last)

    def test_full_mode_at_least_as_good(self):
        imgs = micro_images(20)
        run = {}
        for mode in ("full", "partial"):
            cfg = micro_cfg(mode, epochs=120, batch_size=10, learning_rate=2e-3)
            run[mode] = train_dcae(imgs, cfg).curve[-1][1]
        assert run["full"] <= run["partial"], run

    def test_full_mode_binarizes_nothing(self):
        net = DcaeNet(micro_cfg("full"))
        assert net.binarized_layer_names() == ()

    def test_partial_mode_never_binarizes_decoder(self):
        net = DcaeNet(micro_cfg("partial"))
        names = net.binarized_layer_names()
        assert names and all(n.startswith("enc_") for n in names)

    def test_binary_mode_binarizes_everything(self):
        net = DcaeNet(micro_cfg("binary"))
        names = net.binarized_layer_names()
        assert any(n.startswith("dec_") for n in names)
        assert "dec_out" in names

    def test_deterministic_given_seed(self):
        imgs = micro_images(12)
        cfg = micro_cfg("partial", epochs=3, batch_size=6)
        a = train_dcae(imgs, cfg)
        b = train_dcae(imgs, cfg)
        for k in a.net.params:
            assert np.array_equal(a.net.params[k], b.net.params[k]), k
        assert a.curve == b.curve

    def test_divergence_reports_epoch(self):
        imgs = micro_images(8).astype(np.float32) / 255.0
        imgs[0, 0, 0, 0] = np.nan
        with pytest.raises(DivergenceError) as err:
            train_dcae(imgs, micro_cfg("partial", epochs=2, batch_size=8))
        assert err.value.epoch == 0

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_dcae(np.zeros((0, 16, 16, 3), np.uint8), micro_cfg())

    def test_encoder_params_requires_binarized_encoder(self):
        imgs = micro_images(8)
        full = train_dcae(imgs, micro_cfg("full", epochs=1, batch_size=8))
        with pytest.raises(ValueError):
            full.encoder_params()
        pb = train_dcae(imgs, micro_cfg("partial", epochs=1, batch_size=8))
        enc = pb.encoder_params()
        assert enc.input_size == 16

    def test_features_shape_and_codomain(self):
        imgs = micro_images(6)
        pb = train_dcae(imgs, micro_cfg("partial", epochs=1, batch_size=6))
        feats = extract_features(pb.net, imgs)
        assert feats.shape == (6, 64)
        assert set(np.unique(feats)) <= {-1.0, 1.0}
        full = train_dcae(imgs, micro_cfg("full", epochs=1, batch_size=6))
        ff = extract_features(full.net, imgs)
        assert np.all(np.abs(ff) < 1.0)  # tanh features


class TestReconstructionConsistency:
    def test_eval_paths_agree(self):
        # batched eval reconstruction equals the per-image decoder_forward
        from bitmotor.layers import decoder_forward

        imgs = micro_images(4)
        pb = train_dcae(imgs, micro_cfg("partial", epochs=2, batch_size=4))
        x01 = imgs.astype(np.float32) / 255.0
        batched = pb.net.reconstruct(x01)
        feats = pb.net.encode(x01)
        dec = pb.decoder_params()
        single = np.stack([decoder_forward(f, dec) for f in feats])
        assert np.allclose(batched, single, atol=1e-6)


class TestConfig:
    def test_roundtrip(self):
        cfg = TrainConfig.for_size("desk", mode="binary", epochs=7, seed=42)
        parsed = parse_train_config(format_train_config(cfg))
        assert parsed == cfg

    def test_paper_preset(self):
        cfg = parse_train_config("size = paper\nmode = partial\n")
        assert cfg.input_size == 142
        assert cfg.channels == (32, 64, 128, 256)
        assert cfg.fc1_out == 1024

    def test_comments_and_blanks(self):
        cfg = parse_train_config("# comment\n\nmode = full  # trailing\nepochs = 3\n")
        assert cfg.mode == "full" and cfg.epochs == 3

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            parse_train_config("bogus = 1\n")

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            TrainConfig(mode="float16")

    def test_loss_curve_csv(self, tmp_path):
        path = tmp_path / "curve.csv"
        write_loss_curve(path, [(0, 0.5, 0.6), (1, 0.25, 0.3)])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_mse,val_mse"
        assert lines[1].startswith("0,0.5")
