import numpy as np
import pytest

from uatlite.encoder import EncoderConfig, EncoderWeights


def small_config(**kw):
    base = dict(vocab_size=20, max_seq_len=8, num_layers=2, num_heads=2, model_dim=8, ff_dim=16, num_classes=3)
    base.update(kw)
    return EncoderConfig(**base)


def random_weights(config=None, seed=0, std=0.5):
    """Weights large enough that dropout and modulation visibly move the logits."""
    return EncoderWeights.init(config or small_config(), seed=seed, std=std)


def random_tokens(rng, config, length=None):
    t = length or config.max_seq_len
    toks = rng.integers(2, config.vocab_size, size=t)
    toks[0] = 0
    return toks


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def weights(cfg):
    return random_weights(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradient_check(params, config, tokens, labels, masks, coords_per_param=3, h=1e-5, seed=0, floor=1e-5):
    """Relative errors of analytic vs central-difference gradients on sampled coordinates.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor only matters for
    coordinates whose true gradient is (numerically) zero.
    """
    from uatlite.bench.train import loss_and_grads

    _, grads = loss_and_grads(params, config, tokens, labels, masks)
    r = np.random.default_rng(seed)
    errors = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        for idx in r.choice(flat.size, size=min(coords_per_param, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            lp, _ = loss_and_grads(params, config, tokens, labels, masks, need_grads=False)
            flat[idx] = old - h
            lm, _ = loss_and_grads(params, config, tokens, labels, masks, need_grads=False)
            flat[idx] = old
            num = (lp - lm) / (2 * h)
            ana = grads[name].reshape(-1)[idx]
            errors[(name, int(idx))] = abs(ana - num) / max(abs(ana), abs(num), floor)
    return errors


@pytest.fixture(scope="session")
def trained():
    """A small model trained on an ambiguous task, shared by the harness tests."""
    from uatlite.bench.tasks import SyntheticTaskSpec, generate_task
    from uatlite.bench.train import TrainConfig, train_encoder

    spec = SyntheticTaskSpec.from_dict(
        {"ambiguity_fraction": 0.4, "sizes": {"train": 1200, "val": 150, "test_id": 150, "test_ood": 150}}
    )
    splits = generate_task(spec)
    w = train_encoder(splits["train"], EncoderConfig(), seed=0, train_config=TrainConfig(epochs=5))
    return spec, splits, w


# -- acceptance summary -------------------------------------------------------

_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[props["criterion"]] = (report.outcome, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        outcome, title, detail = _ACCEPTANCE[num]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{verdict}] criterion {num:>2}: {title}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)
