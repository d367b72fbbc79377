import numpy as np

from pgrl import verify
from pgrl.oracle import TabularMDP, policy_table
from pgrl.returns import TerminationKind


def test_relative_error_floor():
    assert verify.relative_error(np.array([1.0]), np.array([1.0 + 1e-6])) < 2e-6
    # both tiny: the floor keeps the ratio finite and small
    assert verify.relative_error(np.array([1e-12]), np.array([0.0])) <= 1e-6


def test_check_line_format():
    line = verify.Check("thing", 2e-5, 1e-4, True, "note").line()
    assert line.startswith("PASS  thing: 2.000e-05 (tol 1e-04)") and line.endswith("(note)")


def test_identities_suite_passes():
    checks = verify.identities()
    assert checks and all(c.passed for c in checks)


def test_small_gradcheck_passes():
    assert all(c.passed for c in verify.gradcheck(n_networks=3))


def test_tabular_sampler_matches_environment_records():
    mdp = TabularMDP.load("five_state")
    policy = verify.chain_policy(mdp, 2.0)
    buf = verify.sample_tabular_buffer(mdp, policy, 3000, 10, np.random.default_rng(0))
    buf.check()
    assert len(buf) == 30000 and len(buf.segments()) == 3000
    kinds = [t.termination for t in buf]
    assert kinds[9] is TerminationKind.BOOTSTRAP and buf[9].final_obs is not None
    assert all(k is TerminationKind.RUNNING for k in kinds[:9])
    # logged log-probabilities are the policy's
    pi = policy_table(policy, 5)
    s = np.argmax(buf.observations(), axis=1)
    a = buf.actions().astype(int)
    assert np.allclose(buf.logp_old(), np.log(pi[s, a]))
    # transition frequencies within 4 standard errors of P
    nxt = np.array([np.argmax(buf[i + 1].obs if t.final_obs is None else t.final_obs) for i, t in enumerate(buf)])
    for state in range(5):
        for action in range(2):
            mask = (s == state) & (a == action)
            n = mask.sum()
            if n < 200:
                continue
            freq = np.bincount(nxt[mask], minlength=5) / n
            p = mdp.P[state, action]
            se = np.sqrt(p * (1 - p) / n) + 1e-12
            assert np.all(np.abs(freq - p) <= 4 * se + 1e-12)


def test_suite_names():
    assert set(verify.SUITE_NAMES) == {"gradcheck", "identities", "unbiasedness", "all"}
