"""Compare tau across the four training regimes for one model.

fix_attn freezes random attention, fix_rep retrains attention on a frozen
encoder, and the adversary imitates the outputs while moving its attention.
"""

from attnmi import AnalysisConfig, ModelConfig, TrainConfig, analyze, capture, generate_planted_token, train

ds = generate_planted_token(3000, 10, 40, seed=0)
cfg = ModelConfig(vocab_size=40, encoder_kind="bilstm", attention_kind="additive", embed_dim=16, hidden_dim=32)
common = dict(max_epochs=40, learning_rate=0.003, seed=0)
acfg = AnalysisConfig(permutations=0)

base, _ = train(cfg, ds, TrainConfig(regime="normal", **common))
tau = {"normal": analyze(capture(base, ds.test), acfg).weighted_kendall_tau}
for regime, extra in (("fix_attn", {}), ("fix_rep", {}), ("adversarial", {"lambda": 1e-2})):
    model, rep = train(cfg, ds, TrainConfig.from_dict({"regime": regime, **common, **extra}), base=base)
    tau[regime] = analyze(capture(model, ds.test), acfg).weighted_kendall_tau
    if rep.adversarial:
        a = rep.adversarial
        print(f"adversary: output TVD {a['output_tvd']:.4f}, attention JSD {a['attention_jsd']:.4f}")
for regime, t in tau.items():
    print(f"{regime:12s} tau {t:+.3f}  normal minus this {tau['normal'] - t:+.3f}")
