"""Smoke test for the flue_py extension module.

Build and run:
    maturin develop -m crates/python/Cargo.toml
    python crates/python/python/smoke_test.py
"""

import json
import math
import os
import tempfile

import flue_py


def main():
    cfg = flue_py.Config(overrides=[
        "model.preset=toy",
        "model.max_positions=64",
        "adam.warmup_steps=2",
        "adam.total_steps=6",
        "adam.accumulation=1",
        "train.micro_batch=8",
    ])
    assert cfg.lr_at_step(0) == 0.0
    assert flue_py.Config.parse(cfg.render()).render() == cfg.render()

    lines = [
        "Le chat dort sur le canapé du salon .",
        "Le chat dort sur le canapé du salon .",
        "Écrivez à contact@example.com pour plus d'informations sur ce sujet .",
        "La voisine découvre un billet de train au marché !",
        "Les enfants jouent dans le jardin après l'école .",
    ]
    kept, stats = flue_py.clean_lines(lines)
    stats = json.loads(stats)
    assert stats["lines_in"] == 5 and stats["lines_kept"] == len(kept) == 3, stats
    assert stats["drop_reasons"] == {"duplicate": 1, "email": 1}, stats
    assert flue_py.prepare("Bonjour, le Monde!") == ["bonjour", ",", "le", "monde", "!"]

    tok = flue_py.Tokenizer.learn(kept * 4, 50)
    for sent in kept:
        assert tok.decode(tok.encode(sent)) == sent
    assert "".join(tok.segment("chat")).replace("</w>", "") == "chat"

    model = flue_py.Model.init(tok, cfg, seed=1)
    ids = tok.encode(kept[0])
    states = model.encode(ids)
    assert len(states) == len(ids) and len(states[0]) == model.hidden

    seqs = [tok.encode(s) for s in kept] * 8
    initial = model.mlm_loss(seqs, seed=3)
    assert abs(initial - math.log(tok.vocab_size)) < 0.1 * math.log(tok.vocab_size), initial

    trainer = flue_py.Trainer(model, seqs, cfg)
    assert trainer.effective_batch == 8
    losses = [trainer.step()[2] for _ in range(6)]
    assert all(math.isfinite(x) for x in losses), losses
    assert trainer.current_step == 6
    try:
        flue_py.Tokenizer.load("/nonexistent")
        raise AssertionError("loading a missing tokenizer should fail")
    except flue_py.FlueError:
        pass

    with tempfile.TemporaryDirectory() as d:
        ckpt = os.path.join(d, "final.mlmf")
        trainer.save(ckpt)
        tok.save(d)
        again = flue_py.Model.load(ckpt)
        assert again.num_parameters == model.num_parameters
        assert flue_py.Tokenizer.load(d).vocab_hash == tok.vocab_hash

    print("flue_py smoke test passed:", flue_py.__version__, f"{model.num_parameters} parameters")


if __name__ == "__main__":
    main()
