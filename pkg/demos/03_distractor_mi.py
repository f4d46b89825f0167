"""Label noise caps the information a representation can hold about the label.

For the distractor task the ceiling is 1 - H_b(noise). We quantize the
trained model's hidden state at the signal position and estimate the MI.
"""

import numpy as np

from attnmi import ModelConfig, TrainConfig, capture, fit_quantizer, generate_distractor_task, mutual_information, train
from attnmi.data import analytic_distractor_mi

for noise in (0.0, 0.11, 0.3):
    ds = generate_distractor_task(3000, 10, 40, noise, seed=0)
    cfg = ModelConfig(vocab_size=40, encoder_kind="bilstm", attention_kind="additive", embed_dim=16, hidden_dim=32)
    model, rep = train(cfg, ds, TrainConfig(max_epochs=40, learning_rate=0.003, seed=0))
    probe = generate_distractor_task(12500, 10, 40, noise, seed=100)
    examples = probe.train[:10_000]
    pos = probe.meta["signal_positions"]["train"][:10_000]
    records = capture(model, examples)
    H = np.array([r.hidden[p] for r, p in zip(records, pos)])
    q = fit_quantizer(H, seed=0)
    mi = mutual_information(q.labels, [e.label for e in examples])
    print(f"noise {noise:.2f}: accuracy {rep.test_accuracy:.3f} (Bayes {1 - noise:.2f}), "
          f"MI {mi:.3f} bits vs analytic {analytic_distractor_mi(noise):.3f}, {q.n_clusters} clusters")
