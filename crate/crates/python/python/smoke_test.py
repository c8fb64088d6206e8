"""Smoke test for the emma extension module.

Build and install first:  pip install maturin && maturin develop -m crates/python/Cargo.toml
"""

import math

import emma


def main() -> None:
    cfg = emma.Config.tiny()
    model = emma.Model(cfg, seed=3)
    print(cfg, "params:", model.num_params)

    (pixels, caption), = emma.make_dataset(seed=1, n=1, image_size=cfg.image_size)
    assert len(pixels) == 3 * cfg.image_size ** 2
    assert emma.parse_caption(caption), caption

    feats = model.encode_image(pixels)
    assert len(feats) % cfg.num_patches == 0

    losses = model.losses(pixels, caption)
    assert losses["text"] > 0 and losses["pixel"] > 0, losses
    assert math.isclose(losses["total"], losses["text"] + losses["pixel"], rel_tol=1e-5)

    logits = model.text_logits(pixels, caption)
    model.strip_alignment_heads()
    assert model.text_logits(pixels, caption) == logits, "alignment heads touched the logits"

    text = model.generate(pixels, prompt="red", n_tokens=8, forced=True)
    print("generated:", repr(text))

    a_bar, b_bar = emma.discretize_zoh([-1.0], [1.0], 1.0)
    assert abs(a_bar[0] - math.exp(-1)) < 1e-12 and abs(b_bar[0] - (1 - math.exp(-1))) < 1e-12

    rep = emma.latency_report(342.0, 200, 256)
    assert abs(rep["t_avg"] - 1.71) < 1e-12 and abs(rep["n_avg"] - 149.707) < 1e-3

    assert emma.lr_at(0, 100, 1e-3, 0.03) == 0.0

    failed = [name for name, ok, _ in emma.selftest() if not ok]
    assert not failed, failed
    print("smoke test passed")


if __name__ == "__main__":
    main()
