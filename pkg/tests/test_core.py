import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from offline_pretrain.core import (AnnotationMode, DoneKind, OfflineDataset, ReturnConfig,
                                   TimeoutMode, Trajectory, TrajectoryError, Transition,
                                   annotate_dataset, compute_mixed_target, compute_return_to_go,
                                   compute_soft_return_to_go, content_hash, dumps_jsonl,
                                   load_jsonl, save_jsonl)
from offline_pretrain.envs import motivational_mdp


def chain(rewards, end=DoneKind.TERMINATION, dim=None):
    """A contiguous trajectory over states 0, 1, 2, ... (or 1-d vectors)."""
    out = []
    for i, r in enumerate(rewards):
        kind = end if i == len(rewards) - 1 else DoneKind.NOT_DONE
        s, s2 = (i, i + 1) if dim is None else (np.full(dim, float(i)), np.full(dim, i + 1.0))
        a = 0 if dim is None else np.zeros(dim)
        out.append(Transition(s, a, r, s2, kind))
    return Trajectory(out)


rewards_st = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=30)
gammas = st.floats(0.01, 1.0)


class TestReturnToGo:
    def test_motivational_rewards(self):
        R = compute_return_to_go(chain([0, -1, 0, -2, 3]), ReturnConfig(gamma=1.0))
        assert R.tolist() == [0, 0, 1, 1, 3]

    def test_two_steps(self):
        R = compute_return_to_go(chain([1, 1]), ReturnConfig(gamma=0.9))
        np.testing.assert_allclose(R, [1.9, 1.0], atol=1e-12)

    @pytest.mark.parametrize("gamma", [0.5, 0.99, 1.0])
    def test_single_step(self, gamma):
        assert compute_return_to_go(chain([4.2]), ReturnConfig(gamma=gamma)).tolist() == [4.2]

    @pytest.mark.parametrize("mode", list(TimeoutMode))
    def test_timeout_final_step_is_own_reward(self, mode):
        R = compute_return_to_go(chain([1, 2, 5], end=DoneKind.TIMEOUT),
                                 ReturnConfig(gamma=0.9, timeout_mode=mode))
        assert R[-1] == 5

    def test_empty_rejected(self):
        with pytest.raises(TrajectoryError):
            compute_return_to_go(Trajectory(()), ReturnConfig())

    def test_break_reports_index(self):
        t = [Transition(0, 0, 0, 1), Transition(1, 0, 0, 2), Transition(5, 0, 0, 6, "Termination")]
        with pytest.raises(TrajectoryError) as err:
            compute_return_to_go(Trajectory(t), ReturnConfig())
        assert err.value.index == 1

    def test_done_flag_in_middle_rejected(self):
        t = [Transition(0, 0, 0, 1, "Termination"), Transition(1, 0, 0, 2, "Termination")]
        with pytest.raises(TrajectoryError):
            Trajectory(t).validate()

    @given(rewards_st, gammas)
    def test_recursion(self, rewards, gamma):
        R = compute_return_to_go(chain(rewards), ReturnConfig(gamma=gamma))
        r = np.array(rewards)
        np.testing.assert_allclose(R[:-1] - (r[:-1] + gamma * R[1:]), 0.0, atol=1e-9)

    @given(rewards_st, gammas)
    def test_matches_forward_definition(self, rewards, gamma):
        R = compute_return_to_go(chain(rewards), ReturnConfig(gamma=gamma))
        T = len(rewards)
        brute = [sum(gamma ** n * rewards[t + n] for n in range(T - t)) for t in range(T)]
        np.testing.assert_allclose(R, brute, atol=1e-9, rtol=1e-9)


class TestMixedTarget:
    def test_examples(self):
        assert compute_mixed_target(7.3, 123.0, 0.5, -9.0, 0.0) == 7.3
        assert compute_mixed_target(-50.0, 1.0, 0.9, 2.0, 1.0) == pytest.approx(2.8, abs=1e-12)
        assert compute_mixed_target(2.0, 1.0, 0.9, 2.0, 0.5) == pytest.approx(2.4, abs=1e-12)

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_out_of_range(self, lam):
        with pytest.raises(ValueError):
            compute_mixed_target(1.0, 1.0, 0.9, 1.0, lam)

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), gammas, st.floats(-1e3, 1e3))
    def test_endpoints_exact(self, R, r, gamma, q):
        assert compute_mixed_target(R, r, gamma, q, 0.0) == R
        assert compute_mixed_target(R, r, gamma, q, 1.0) == r + gamma * q

    def test_vectorised(self):
        R, r, q = np.arange(3.0), np.ones(3), np.full(3, 2.0)
        np.testing.assert_allclose(compute_mixed_target(R, r, 0.5, q, 0.25),
                                   0.75 * R + 0.25 * (r + 0.5 * q))


class TestSoftReturn:
    def test_two_steps(self):
        ent = lambda states: np.array([99.0, 2.0])
        R = compute_soft_return_to_go(chain([1, 2]), ReturnConfig(gamma=1.0), 0.5, ent)
        np.testing.assert_allclose(R, [4.0, 2.0])

    def test_single_step_ignores_entropy(self):
        R = compute_soft_return_to_go(chain([3.0]), ReturnConfig(), 10.0, lambda s: np.array([7.0]))
        assert R.tolist() == [3.0]

    def test_negative_temperature(self):
        with pytest.raises(ValueError):
            compute_soft_return_to_go(chain([1]), ReturnConfig(), -1.0, lambda s: np.zeros(1))

    @given(rewards_st, gammas)
    def test_zero_temperature_equals_hard(self, rewards, gamma):
        cfg = ReturnConfig(gamma=gamma)
        tr = chain(rewards)
        soft = compute_soft_return_to_go(tr, cfg, 0.0, lambda s: np.full(len(s), 1e6))
        np.testing.assert_array_equal(soft, compute_return_to_go(tr, cfg))

    @given(rewards_st, gammas, st.floats(0, 2))
    def test_matches_forward_definition(self, rewards, gamma, alpha):
        H = np.linspace(0.1, 1.0, len(rewards))
        R = compute_soft_return_to_go(chain(rewards), ReturnConfig(gamma=gamma), alpha,
                                      lambda s: H[np.asarray(s)])
        T = len(rewards)
        brute = [sum(gamma ** n * rewards[t + n] for n in range(T - t))
                 + alpha * sum(gamma ** n * H[t + n] for n in range(1, T - t)) for t in range(T)]
        np.testing.assert_allclose(R, brute, atol=1e-9, rtol=1e-9)


class TestAnnotate:
    def test_motivational(self):
        _, ds = motivational_mdp()
        ann = annotate_dataset(ds, ReturnConfig(gamma=1.0))
        assert ann.arrays["rtg"].tolist() == [0, 0, 1, 1, 3]
        assert ds.rtg is None  # original untouched

    def test_idempotent(self):
        _, ds = motivational_mdp()
        cfg = ReturnConfig(gamma=0.9)
        a, b = annotate_dataset(ds, cfg), annotate_dataset(annotate_dataset(ds, cfg), cfg)
        assert dumps_jsonl(a) == dumps_jsonl(b)

    def test_empty(self):
        with pytest.raises(ValueError):
            annotate_dataset(OfflineDataset(()), ReturnConfig())

    def test_soft_needs_estimator(self):
        _, ds = motivational_mdp()
        with pytest.raises(ValueError):
            annotate_dataset(ds, ReturnConfig(), AnnotationMode.SOFT, 0.1)

    def test_soft_keeps_hard(self):
        _, ds = motivational_mdp()
        ann = annotate_dataset(ds, ReturnConfig(gamma=1.0), "Soft", 1.0,
                               lambda s: np.ones(len(s)))
        assert ann.arrays["rtg"].tolist() == [0, 0, 1, 1, 3]
        assert ann.arrays["soft_rtg"].tolist() == [4, 3, 3, 2, 3]

    def test_bootstrap_excluded_masks_timeout_tail(self):
        ds = OfflineDataset((chain([1.0] * 30, DoneKind.TIMEOUT, dim=1),
                             chain([1.0] * 30, DoneKind.TERMINATION, dim=1)))
        ann = annotate_dataset(ds, ReturnConfig(gamma=0.9, timeout_mode="BootstrapExcluded"))
        mask = ann.arrays["pretrain_mask"]
        assert mask[:20].all() and not mask[20:30].any() and mask[30:].all()
        plain = annotate_dataset(ds, ReturnConfig(gamma=0.9)).arrays["pretrain_mask"]
        assert plain.all()


class TestConfigAndTypes:
    @pytest.mark.parametrize("kw", [{"gamma": 0.0}, {"gamma": 1.1}, {"lambda_mix": 2.0}])
    def test_bad_return_config(self, kw):
        with pytest.raises(ValueError):
            ReturnConfig(**kw)

    def test_negative_index(self):
        with pytest.raises(ValueError):
            Transition(-1, 0, 0.0, 0)

    def test_annotation_length_checked(self):
        with pytest.raises(ValueError):
            OfflineDataset((chain([1, 2]),), rtg=([1.0],))

    def test_arrays_read_only(self):
        _, ds = motivational_mdp()
        with pytest.raises(ValueError):
            ds.arrays["rewards"][0] = 5.0


class TestJsonl:
    @settings(max_examples=25)
    @given(st.lists(rewards_st, min_size=1, max_size=4), gammas)
    def test_roundtrip(self, tmp_path_factory, reward_lists, gamma):
        ds = OfflineDataset(tuple(chain(r, dim=2) for r in reward_lists))
        ds = annotate_dataset(ds, ReturnConfig(gamma=gamma))
        path = save_jsonl(ds, tmp_path_factory.mktemp("d") / "x.jsonl")
        back = load_jsonl(path, annotation_gamma=gamma)
        assert dumps_jsonl(back) == dumps_jsonl(ds)
        assert content_hash(back) == content_hash(ds)

    def test_fields(self, tmp_path):
        _, ds = motivational_mdp()
        import json
        row = json.loads(dumps_jsonl(ds).splitlines()[0])
        assert set(row) == {"traj_id", "step", "state", "action", "reward", "next_state",
                            "done_kind"}

    def test_hash_is_git_blob_hash(self):
        import hashlib
        _, ds = motivational_mdp()
        data = dumps_jsonl(ds).encode()
        header = f"blob {len(data)}".encode() + b"\x00"
        assert content_hash(ds) == hashlib.sha1(header + data).hexdigest()
