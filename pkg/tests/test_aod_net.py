import numpy as np
import pytest

from hazecraft import aod_net, dataset_io, haze_synth
from hazecraft import tensor_core as tc
from hazecraft.aod_net import ArchVariant, CheckpointError
from hazecraft.tensor_core import GradTape, ShapeError, Tensor

from oracles import conv2d_reference, finite_difference, max_relative_error


def random_input(rng, n=1, h=16, w=16):
    return Tensor(rng.uniform(0.05, 0.95, size=(n, 3, h, w)))


class TestInitParams:
    def test_deterministic(self):
        a = aod_net.init_params(5)
        b = aod_net.init_params(5)
        for name in a.layers:
            np.testing.assert_array_equal(a.layers[name].weights.data, b.layers[name].weights.data)
            np.testing.assert_array_equal(a.layers[name].bias, b.layers[name].bias)

    def test_param_counts(self):
        assert aod_net.param_count(aod_net.init_params(0)) == 1761
        assert aod_net.param_count(aod_net.init_params(0, variant=ArchVariant.PLAIN)) == 852

    def test_count_matches_shape_sum_oracle(self):
        params = aod_net.init_params(1)
        total = 0
        for layer in params.layers.values():
            cout, cin, kh, kw = layer.weights.shape
            total += cout * cin * kh * kw + cout
        assert total == aod_net.param_count(params)

    def test_biases_zero_weights_gaussian(self):
        # Pool weights from several seeds to estimate the sample stddev.
        std = 0.02
        draws = []
        for seed in range(6):
            params = aod_net.init_params(seed, std=std)
            for layer in params.layers.values():
                assert not layer.bias.any()
                draws.append(layer.weights.data.ravel())
        pooled = np.concatenate(draws)
        assert pooled.size >= 10_000
        assert abs(pooled.std() - std) / std < 0.05
        assert abs(pooled.mean()) < std * 0.05

    def test_bad_std_rejected(self):
        with pytest.raises(ValueError):
            aod_net.init_params(0, std=0.0)


class TestEstimateK:
    def test_zero_weights_give_zero_k(self):
        params = aod_net.init_params(0)
        params = params.with_arrays([np.zeros_like(a) for a in params.trainable_arrays()])
        k = aod_net.estimate_k(params, random_input(np.random.default_rng(0)))
        assert not k.data.any()

    @pytest.mark.parametrize("hw", [(16, 16), (30, 40), (480, 640)])
    def test_output_shape_equals_input(self, hw):
        params = aod_net.init_params(1)
        x = random_input(np.random.default_rng(1), h=hw[0], w=hw[1])
        assert aod_net.estimate_k(params, x).shape == x.shape

    def test_matches_layerwise_reference(self):
        # Rebuild the dataflow with the loop-convolution oracle.
        rng = np.random.default_rng(2)
        params = aod_net.init_params(7, std=0.3)
        x = rng.uniform(0, 1, size=(1, 3, 9, 9))

        def ref_conv_relu(name, data, relu=True):
            layer = params.layers[name]
            out = conv2d_reference(
                data, layer.weights.data, layer.bias, (layer.weights.shape[2] - 1) // 2
            )
            return np.maximum(out, 0.0) if relu else out

        c1 = ref_conv_relu("conv1", x)
        c2 = ref_conv_relu("conv2", c1)
        c3 = ref_conv_relu("conv3", np.concatenate([c1, c2], axis=1))
        c4 = ref_conv_relu("conv4", np.concatenate([c2, c3], axis=1))
        k_ref = np.maximum(
            ref_conv_relu("conv5", np.concatenate([c1, c2, c3, c4], axis=1), relu=False), 0.0
        )
        k = aod_net.estimate_k(params, Tensor(x))
        np.testing.assert_allclose(k.data, k_ref, atol=1e-10)

    def test_plain_variant_is_a_chain(self):
        rng = np.random.default_rng(3)
        params = aod_net.init_params(7, std=0.3, variant=ArchVariant.PLAIN)
        x = rng.uniform(0, 1, size=(1, 3, 9, 9))

        data = x
        for i, name in enumerate(("conv1", "conv2", "conv3", "conv4", "conv5")):
            layer = params.layers[name]
            data = conv2d_reference(
                data, layer.weights.data, layer.bias, (layer.weights.shape[2] - 1) // 2
            )
            data = np.maximum(data, 0.0)
        k = aod_net.estimate_k(params, Tensor(x))
        np.testing.assert_allclose(k.data, data, atol=1e-10)

    def test_final_relu_flag(self):
        params = aod_net.init_params(11, std=0.4)
        x = random_input(np.random.default_rng(4))
        gated = aod_net.estimate_k(params, x, final_relu=True)
        raw = aod_net.estimate_k(params, x, final_relu=False)
        assert raw.data.min() < 0  # this seed produces negative preactivations
        np.testing.assert_array_equal(gated.data, np.maximum(raw.data, 0.0))

    def test_too_small_input_rejected(self):
        params = aod_net.init_params(0)
        with pytest.raises(ShapeError):
            aod_net.estimate_k(params, Tensor(np.zeros((1, 3, 6, 8))))

    def test_translation_equivariance_away_from_borders(self):
        params = aod_net.init_params(5, std=0.3)
        rng = np.random.default_rng(5)
        base = rng.uniform(0, 1, size=(1, 3, 40, 40))
        dy, dx = 3, 5
        shifted = np.roll(base, (dy, dx), axis=(2, 3))
        k_base = aod_net.estimate_k(params, Tensor(base)).data
        k_shift = aod_net.estimate_k(params, Tensor(shifted)).data
        m = 7  # receptive-field margin
        inner_base = k_base[:, :, m : 40 - m - dy, m : 40 - m - dx]
        inner_shift = k_shift[:, :, m + dy : 40 - m, m + dx : 40 - m]
        np.testing.assert_allclose(inner_shift, inner_base, atol=1e-12)


class TestGenerateClean:
    def test_zero_k_gives_bias_constant(self):
        rng = np.random.default_rng(6)
        hazy = random_input(rng, h=8, w=8)
        k = Tensor(np.zeros(hazy.shape))
        out = aod_net.generate_clean(k, hazy, 1.0)
        np.testing.assert_array_equal(out.data, np.ones(hazy.shape))

    def test_unit_k_is_identity(self):
        rng = np.random.default_rng(7)
        hazy = random_input(rng, h=8, w=8)
        k = Tensor(np.ones(hazy.shape))
        out = aod_net.generate_clean(k, hazy, 1.0)
        np.testing.assert_allclose(out.data, hazy.data, atol=1e-15)

    def test_hand_value(self):
        k = Tensor(np.full((1, 3, 2, 2), 2.0))
        hazy = Tensor(np.full((1, 3, 2, 2), 0.75))
        out = aod_net.generate_clean(k, hazy, 1.0)
        np.testing.assert_allclose(out.data, 0.5)


class TestGroundTruthK:
    def test_hand_value(self):
        hazy = Tensor(np.full((1, 3, 2, 2), 0.75))
        t = Tensor(np.full((1, 1, 2, 2), 0.5))
        k, valid = aod_net.ground_truth_k(hazy, t, (1.0, 1.0, 1.0), b=1.0)
        assert valid.all()
        np.testing.assert_allclose(k.data, 2.0)

    def test_constant_scene_equal_to_a(self):
        # J = A means I = A for every t; with b = A the numerator vanishes.
        a = (0.8, 0.8, 0.8)
        hazy = Tensor(np.full((1, 3, 4, 4), 0.8))
        t = Tensor(np.full((1, 1, 4, 4), 0.37))
        k, valid = aod_net.ground_truth_k(hazy, t, a, b=0.8)
        assert valid.all()
        np.testing.assert_allclose(k.data, 0.0, atol=1e-12)

    def test_singular_pixels_masked_not_produced(self):
        hazy_data = np.full((1, 3, 2, 2), 0.7)
        hazy_data[0, :, 0, 0] = 1.0  # exactly at the singularity
        hazy = Tensor(hazy_data)
        t = Tensor(np.full((1, 1, 2, 2), 0.5))
        k, valid = aod_net.ground_truth_k(hazy, t, (0.9, 0.9, 0.9))
        assert not valid[0, :, 0, 0].any()
        assert valid[0, :, 1, 1].all()
        np.testing.assert_array_equal(k.data[0, :, 0, 0], 0.0)
        assert np.isfinite(k.data).all()

    def test_round_trip_reproduces_clean(self):
        rng = np.random.default_rng(8)
        clean, depth = haze_synth.procedural_scene(42, 16, 16)
        t = haze_synth.transmission_from_depth(depth, 1.0)
        a = (0.85, 0.9, 0.95)
        hazy = haze_synth.apply_scattering(clean, t, a)
        hazy_t = Tensor(dataset_io.image_to_nchw(hazy))
        k, valid = aod_net.ground_truth_k(hazy_t, Tensor(t[None, None]), a)
        recon = aod_net.generate_clean(k, hazy_t, 1.0)
        err = np.abs(recon.data - dataset_io.image_to_nchw(clean))[valid]
        assert err.max() < 1e-9

    def test_nonpositive_transmission_rejected(self):
        hazy = Tensor(np.full((1, 3, 2, 2), 0.5))
        with pytest.raises(ValueError):
            aod_net.ground_truth_k(hazy, Tensor(np.zeros((1, 1, 2, 2))), (1, 1, 1))


class TestDehaze:
    def test_zero_weights_give_white_image(self):
        params = aod_net.init_params(0)
        params = params.with_arrays([np.zeros_like(a) for a in params.trainable_arrays()])
        out = aod_net.dehaze(params, random_input(np.random.default_rng(9)))
        np.testing.assert_array_equal(out.data, np.ones(out.shape))

    @pytest.mark.parametrize("hw", [(7, 7), (16, 25)])
    def test_shape_preserved(self, hw):
        params = aod_net.init_params(1)
        x = random_input(np.random.default_rng(10), h=hw[0], w=hw[1])
        assert aod_net.dehaze(params, x).shape == x.shape

    def test_end_to_end_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        params = aod_net.init_params(3, std=0.5)
        hazy = rng.uniform(0.05, 0.95, size=(1, 3, 8, 8))
        target = rng.uniform(0, 1, size=hazy.shape)

        tape = GradTape()
        hazy_t = Tensor(hazy)
        loss = tc.mse_loss(aod_net.dehaze(params, hazy_t, tape=tape), Tensor(target), tape)
        grads = tape.backward(loss)

        refs = params.trainable_refs()
        arrays = params.trainable_arrays()
        for slot in (0, 1, 8, 9):  # conv1 weights/bias, conv5 weights/bias
            def scalar(v, _slot=slot):
                trial = params.with_arrays([v if j == _slot else arrays[j] for j in range(len(arrays))])
                return tc.mse_loss(aod_net.dehaze(trial, Tensor(hazy)), Tensor(target)).item()

            numeric = finite_difference(scalar, arrays[slot])
            assert max_relative_error(grads[refs[slot]], numeric) < 1e-5


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        params = aod_net.init_params(13, std=0.37)
        path = tmp_path / "model.ckpt"
        aod_net.save_checkpoint(params, path)
        back = aod_net.load_checkpoint(path)
        assert back.variant is ArchVariant.MULTISCALE
        for name in params.layers:
            np.testing.assert_array_equal(
                back.layers[name].weights.data, params.layers[name].weights.data
            )
            np.testing.assert_array_equal(back.layers[name].bias, params.layers[name].bias)

    def test_plain_round_trip(self, tmp_path):
        params = aod_net.init_params(14, variant=ArchVariant.PLAIN)
        path = tmp_path / "plain.ckpt"
        aod_net.save_checkpoint(params, path)
        assert aod_net.load_checkpoint(path).variant is ArchVariant.PLAIN

    def test_truncated_file_names_missing_layer(self, tmp_path):
        params = aod_net.init_params(15)
        path = tmp_path / "model.ckpt"
        aod_net.save_checkpoint(params, path)
        lines = path.read_text().splitlines()
        cut = next(i for i, line in enumerate(lines) if line.startswith("layer conv4"))
        path.write_text("\n".join(lines[:cut]) + "\n")
        with pytest.raises(CheckpointError, match="conv4"):
            aod_net.load_checkpoint(path)

    def test_variant_mismatch_refused(self, tmp_path):
        params = aod_net.init_params(16, variant=ArchVariant.PLAIN)
        path = tmp_path / "plain.ckpt"
        aod_net.save_checkpoint(params, path)
        with pytest.raises(CheckpointError, match="plain"):
            aod_net.load_checkpoint(path, variant=ArchVariant.MULTISCALE)

    def test_non_numeric_token_names_line(self, tmp_path):
        params = aod_net.init_params(17)
        path = tmp_path / "model.ckpt"
        aod_net.save_checkpoint(params, path)
        lines = path.read_text().splitlines()
        tokens = lines[2].split()
        tokens[1] = "bogus"
        lines[2] = " ".join(tokens)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CheckpointError, match=r":3:.*bogus"):
            aod_net.load_checkpoint(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("NOT-A-CHECKPOINT\n")
        with pytest.raises(CheckpointError, match=":1:"):
            aod_net.load_checkpoint(path)

    def test_wrong_layer_shape_rejected(self, tmp_path):
        params = aod_net.init_params(18)
        path = tmp_path / "model.ckpt"
        aod_net.save_checkpoint(params, path)
        text = path.read_text().replace("layer conv3 3 6 5 5", "layer conv3 3 6 3 3")
        path.write_text(text)
        with pytest.raises(CheckpointError, match="conv3"):
            aod_net.load_checkpoint(path)

    def test_17_digit_scalars_round_trip_doubles(self, tmp_path):
        params = aod_net.init_params(19)
        arrays = params.trainable_arrays()
        arrays[0] = arrays[0] + np.pi * 1e-7  # force awkward mantissas
        params = params.with_arrays(arrays)
        path = tmp_path / "model.ckpt"
        aod_net.save_checkpoint(params, path)
        back = aod_net.load_checkpoint(path)
        np.testing.assert_array_equal(
            back.layers["conv1"].weights.data, params.layers["conv1"].weights.data
        )
