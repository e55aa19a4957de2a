import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bevdecomp import BevAutoencoder, BevSegmenter, PolarResampler
from bevdecomp.evaluation import random_baseline, valid_masks
from bevdecomp.metrics import EvalReport

from conftest import tiny_config


def test_params_and_clone():
    est = BevSegmenter(epochs=3, random_state=4, threshold=0.4)
    params = est.get_params()
    assert params == {"config": None, "epochs": 3, "random_state": 4, "threshold": 0.4}
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert BevAutoencoder(eta=0.25).set_params(eta=0.1).eta == 0.1


def test_not_fitted():
    with pytest.raises(NotFittedError):
        BevSegmenter().predict(np.zeros((1, 3, 128, 352), np.uint8))
    with pytest.raises(NotFittedError):
        PolarResampler().transform(np.zeros((1, 6, 200, 200), bool))


def test_input_validation(split12):
    est = BevSegmenter(config=tiny_config(1))
    with pytest.raises(ValueError, match="channels"):
        est.fit(split12.images[:4], split12.bev[:4, :3])
    with pytest.raises(ValueError, match="inconsistent"):
        est.fit(split12.images[:4], split12.bev[:3])
    with pytest.raises(ValueError, match="binary"):
        est.fit(split12.images[:2], split12.bev[:2] * 2)
    with pytest.raises(ValueError, match=r"images are"):
        est.fit(split12.images[:2, :, :64], split12.bev[:2])


def test_resampler_matches_functions(split12):
    from bevdecomp.geometry import cart_to_polar
    cfg = tiny_config(1)
    r = PolarResampler().fit()
    polar = r.transform(split12.bev[:2])
    assert np.array_equal(polar, cart_to_polar(split12.bev[:2], cfg.camera_model, cfg.gspec,
                                               cfg.pspec))
    assert r.inverse_transform(polar).shape == split12.bev[:2].shape


def test_autoencoder_estimator(split12):
    ae = BevAutoencoder(config=tiny_config(1)).fit(split12.bev[:8])
    z = ae.transform(split12.bev[:2])
    assert z.shape == (2, 64, 4, 11)
    soft = ae.inverse_transform(z)
    assert soft.shape == (2, 6, 32, 88) and ((soft >= 0) & (soft <= 1)).all()
    assert 0 <= ae.score(split12.bev[8:]) <= 1


@pytest.mark.parametrize("td", [True, False])
def test_segmenter_fit_predict(split12, td):
    cfg = tiny_config(1, ablation__td=td, ablation__ft=td)
    est = BevSegmenter(config=cfg).fit(split12.images[:8], split12.bev[:8],
                                       split12.visibility[:8])
    assert set(est.stages_) == ({"ae", "align", "finetune"} if td else {"joint"})
    proba = est.predict_proba(split12.images[8:])
    assert proba.shape == (4, 6, 200, 200)
    assert np.array_equal(est.predict(split12.images[8:]), proba >= 0.5)
    # channel-last float input is accepted
    hwc = split12.images[8:].transpose(0, 2, 3, 1) / 255.0
    assert np.allclose(est.predict_proba(hwc), proba)
    rep = est.evaluate(split12.images[8:], split12.bev[8:], split12.visibility[8:])
    assert isinstance(rep, EvalReport) and rep.samples == 4
    assert est.score(split12.images[8:], split12.bev[8:], split12.visibility[8:]) == rep.mean_iou
    again = BevSegmenter.from_checkpoint(est.checkpoint_).predict_proba(split12.images[8:])
    assert np.array_equal(again, proba)


def test_untrained_model_near_random_baseline(split12):
    """An untrained network carries no scene information, so its best pooled IoU
    per class sits at (or just below) the class frequency in the valid region."""
    cfg = tiny_config(0)
    est = BevSegmenter(config=cfg).fit(split12.images[:2], split12.bev[:2])
    val = split12
    rep = est.evaluate(val.images, val.bev, val.visibility)
    base = random_baseline(val, cfg)
    got = np.asarray(rep.per_class_iou)
    present = base > 0
    assert np.all(got[present] <= base[present] * 1.25 + 0.02)
    assert abs(got[present].mean() - base[present].mean()) < 0.1
    # manual recomputation of the oracle
    masks = valid_masks(val, cfg, True)
    k = 0
    want = (val.bev[:, k] & masks).sum() / masks.sum()
    assert base[k] == pytest.approx(want)
