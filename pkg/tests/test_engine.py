import json
import struct

import numpy as np
import pytest
import torch

from fdcheck import BOX_MAX, BOX_MIN, random_field
from scenedistill.anchor import synth_anchor
from scenedistill.engine import (Adam, EngineParams, Prompts, RngStreams,
                                 SceneState, inside_anchor_fraction,
                                 load_checkpoint, save_checkpoint, step,
                                 trace_focus, trace_focus_union)
from scenedistill.field import RadianceField, grid_occupancy_alpha, voxel_center_positions
from scenedistill.guidance import GuidanceTransportError, MockGuidance
from scenedistill.losses import Schedule, schedule_at


def desk_params(**overrides):
    base = dict(resolution=(8, 8), samples_per_ray=8, geo_samples_in=64,
                geo_samples_out=64, head_fraction=0.2)
    base.update(overrides)
    return EngineParams(**base)


def desk_state(anchor, seed=11, grid=12):
    prompts = Prompts("a hiker", "a backpack", "a hiker wearing a backpack")
    return SceneState.fresh(anchor, prompts, grid, seed, EngineParams())


def mock_provider(res=8):
    gray = np.full((res, res, 3), 0.5)
    return MockGuidance({r: gray for r in ("human", "human_head", "object",
                                           "interaction")})


class TestTraceFocus:
    def test_single_voxel(self):
        fld = RadianceField.empty((8, 8, 8), BOX_MIN, BOX_MAX)
        with torch.no_grad():
            fld.raw_density[2, 3, 4] = 1e4
        center = fld.box_min + (np.array([2, 3, 4]) + 0.5) * fld.cell
        assert trace_focus(fld) == pytest.approx(center)

    def test_symmetric_pair_centers_on_origin(self):
        fld = RadianceField.empty((8, 8, 8), BOX_MIN, BOX_MAX)
        with torch.no_grad():
            fld.raw_density[1, 1, 1] = 1e4
            fld.raw_density[6, 6, 6] = 1e4
        assert trace_focus(fld) == pytest.approx([0.0, 0.0, 0.0], abs=1e-12)

    def test_empty_field_returns_box_center(self):
        fld = RadianceField.empty((8, 8, 8), (0.0, 0.0, 0.0), (2.0, 2.0, 4.0))
        assert trace_focus(fld) == pytest.approx([1.0, 1.0, 2.0])

    def test_matches_brute_force_scan(self):
        for seed in range(20):
            fld = random_field(6, seed=seed, dtype=torch.float32, scale=2.0)
            got = trace_focus(fld)
            # independent scan: python loop over every voxel
            alphas = grid_occupancy_alpha(fld).detach().numpy()
            centers = voxel_center_positions(fld)
            acc, count = np.zeros(3), 0
            for i in range(6):
                for j in range(6):
                    for k in range(6):
                        if alphas[i, j, k] > 0.5:
                            acc += centers[i, j, k]
                            count += 1
            expected = acc / count if count else np.zeros(3)
            assert got == pytest.approx(expected, abs=1e-12)

    def test_union_focus_concatenates_fields(self):
        fa = RadianceField.empty((8, 8, 8), BOX_MIN, BOX_MAX)
        fb = RadianceField.empty((8, 8, 8), BOX_MIN, BOX_MAX)
        with torch.no_grad():
            fa.raw_density[1, 1, 1] = 1e4
            fb.raw_density[6, 6, 6] = 1e4
        assert trace_focus_union(fa, fb) == pytest.approx([0.0, 0.0, 0.0], abs=1e-12)


class TestRngStreams:
    def test_streams_independent_and_seeded(self):
        a, b = RngStreams(5), RngStreams(5)
        assert a.camera.uniform() == b.camera.uniform()
        assert a.noise.uniform() == b.noise.uniform()

    def test_snapshot_restore(self):
        streams = RngStreams(9)
        streams.camera.uniform(size=10)
        snap = streams.state_snapshot()
        x = streams.noise.uniform()
        streams.restore(snap)
        assert streams.noise.uniform() == x


class TestAdam:
    def test_descends_quadratic(self):
        p = torch.tensor([4.0, -3.0], requires_grad=True)
        opt = Adam([p], lr=0.1, betas=(0.9, 0.99), eps=1e-8)
        for _ in range(300):
            opt.zero_grad()
            (p**2).sum().backward()
            opt.step()
        assert float(p.detach().abs().max()) < 1e-2


class TestStep:
    def test_lambda_consumed_matches_schedule(self, capsule_anchor):
        params = desk_params()
        schedule = Schedule(total_iters=2000, eta=0.2)
        state = desk_state(capsule_anchor)
        state.iteration = 300
        record = step(state, mock_provider(), params, schedule)
        expected = schedule_at(schedule, 300)
        assert record["lambda1"] == expected.lambda1
        assert record["lambda2"] == expected.lambda2

    def test_deterministic_two_runs(self, capsule_anchor):
        params = desk_params()
        schedule = Schedule(total_iters=2000, eta=0.2)
        outs = []
        for _ in range(2):
            state = desk_state(capsule_anchor, seed=3)
            for _ in range(5):
                step(state, mock_provider(), params, schedule)
            outs.append((state.field_h.raw_density.detach().clone(),
                         state.field_o.raw_density.detach().clone()))
        assert torch.equal(outs[0][0], outs[1][0])
        assert torch.equal(outs[0][1], outs[1][1])

    def test_provider_failure_restores_rng(self, capsule_anchor):
        params = desk_params()
        schedule = Schedule(total_iters=2000, eta=0.2)

        class FlakyProvider:
            def __init__(self, inner, fail_times):
                self.inner = inner
                self.remaining = fail_times

            def schedule(self):
                return self.inner.schedule()

            def predict_noise(self, x_t, t, cond):
                if self.remaining > 0:
                    self.remaining -= 1
                    raise GuidanceTransportError("synthetic outage")
                return self.inner.predict_noise(x_t, t, cond)

        # run A: fail once on iteration 3, retry, then continue
        state_a = desk_state(capsule_anchor, seed=21)
        flaky = FlakyProvider(mock_provider(), fail_times=1)
        done = 0
        while done < 5:
            try:
                step(state_a, flaky, params, schedule)
                done += 1
            except GuidanceTransportError:
                pass  # retried without state corruption

        # run B: clean provider throughout
        state_b = desk_state(capsule_anchor, seed=21)
        for _ in range(5):
            step(state_b, mock_provider(), params, schedule)

        assert torch.equal(state_a.field_h.raw_density, state_b.field_h.raw_density)
        assert torch.equal(state_a.field_o.raw_color, state_b.field_o.raw_color)
        assert state_a.iteration == state_b.iteration

    def test_interaction_truncation_leaves_human_untouched_by_object_terms(
            self, capsule_anchor):
        # disable the human-side terms; with only object+interaction SDS the
        # human field must receive zero gradient through the composite path
        params = desk_params(enable_head_sds=False)
        schedule = Schedule(total_iters=2000, eta=0.2)
        state = desk_state(capsule_anchor, seed=5)
        from scenedistill.losses import sds_term
        from scenedistill.render import render_composite, sample_camera

        half = float(0.5 * (capsule_anchor.box_max - capsule_anchor.box_min).max())
        cam = sample_camera(state.rng.camera, (0, 0, 0), (1.4 * half, 1.4 * half),
                            (0, 30), resolution=(8, 8))
        out = render_composite(state.field_h, state.field_o, cam, 8,
                               truncate_human_grad=True)
        from scenedistill.guidance import build_condition
        cond = build_condition(state.prompts.interaction, "interaction", cam)
        term = sds_term(out, cond, mock_provider(), t=0.5, epsilon_seed=7)
        state.optimizer.zero_grad()
        term.proxy.backward()
        assert state.field_h.raw_density.grad is None
        assert state.field_h.raw_color.grad is None
        grad_o = state.field_o.raw_density.grad
        assert grad_o is not None and float(grad_o.abs().sum()) > 0


class TestCheckpoint:
    def test_round_trip_bit_exact(self, capsule_anchor, tmp_path):
        params = desk_params()
        schedule = Schedule(total_iters=2000, eta=0.2)
        state = desk_state(capsule_anchor, seed=7)
        for _ in range(3):
            step(state, mock_provider(), params, schedule)
        path = tmp_path / "state.ifck"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path, capsule_anchor)
        assert loaded.iteration == state.iteration
        assert torch.equal(loaded.field_h.raw_density, state.field_h.raw_density)
        assert torch.equal(loaded.field_o.raw_color, state.field_o.raw_color)
        for a, b in zip(loaded.optimizer.m, state.optimizer.m):
            assert torch.equal(a, b)
        assert loaded.rng.state_snapshot() == state.rng.state_snapshot()
        assert loaded.prompts == state.prompts

    def test_resume_matches_uninterrupted(self, capsule_anchor, tmp_path):
        params = desk_params()
        schedule = Schedule(total_iters=2000, eta=0.2)

        straight = desk_state(capsule_anchor, seed=13)
        for _ in range(6):
            step(straight, mock_provider(), params, schedule)

        broken = desk_state(capsule_anchor, seed=13)
        for _ in range(3):
            step(broken, mock_provider(), params, schedule)
        path = tmp_path / "mid.ifck"
        save_checkpoint(broken, path)
        resumed = load_checkpoint(path, capsule_anchor)
        for _ in range(3):
            step(resumed, mock_provider(), params, schedule)

        assert torch.equal(resumed.field_h.raw_density, straight.field_h.raw_density)
        assert torch.equal(resumed.field_o.raw_density, straight.field_o.raw_density)
        # bytes on disk must agree too
        p1, p2 = tmp_path / "a.ifck", tmp_path / "b.ifck"
        save_checkpoint(resumed, p1)
        save_checkpoint(straight, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt_magic_rejected(self, capsule_anchor, tmp_path):
        state = desk_state(capsule_anchor)
        path = tmp_path / "c.ifck"
        save_checkpoint(state, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            load_checkpoint(path, capsule_anchor)

    def test_bad_version_rejected(self, capsule_anchor, tmp_path):
        state = desk_state(capsule_anchor)
        path = tmp_path / "v.ifck"
        save_checkpoint(state, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            load_checkpoint(path, capsule_anchor)

    def test_size_predictable_from_resolution(self, capsule_anchor, tmp_path):
        state = desk_state(capsule_anchor, grid=12)
        path = tmp_path / "s.ifck"
        save_checkpoint(state, path)
        n = 12**3
        field_chunk = 12 + 48 + 4 * n + 12 * n          # res + bounds + params
        prompts = [state.prompts.human, state.prompts.object,
                   state.prompts.interaction]
        prompt_bytes = sum(4 + len(p.encode()) for p in prompts)
        rng_blob = len(json.dumps(state.rng.state_snapshot(),
                                  sort_keys=True).encode())
        expected = (
            4 + 4 + 8 + 8                 # magic, version, iteration, seed
            + prompt_bytes
            + 2 * (4 + field_chunk)       # two length-prefixed field chunks
            + 8 + 24 + 8                  # adam step count + hyperparams
            # m and v for two fields x (density, color) = 4 blobs each size
            + 4 * (4 + 4 * n) + 4 * (4 + 12 * n)
            + 4 + rng_blob
        )
        assert path.stat().st_size == expected


class TestAnchorPreservation:
    def test_anchor_grid_never_mutated(self, capsule_anchor):
        before = capsule_anchor.grid.copy()
        params = desk_params()
        state = desk_state(capsule_anchor)
        for _ in range(3):
            step(state, mock_provider(), params, Schedule(total_iters=2000, eta=0.2))
        assert np.array_equal(capsule_anchor.grid, before)

    def test_inside_fraction_metric(self, capsule_anchor):
        fld = RadianceField.empty(capsule_anchor.grid.shape,
                                  capsule_anchor.box_min, capsule_anchor.box_max)
        assert inside_anchor_fraction(fld, capsule_anchor) == 0.0
        with torch.no_grad():
            fld.raw_density.fill_(1e4)
        assert inside_anchor_fraction(fld, capsule_anchor) == 1.0
