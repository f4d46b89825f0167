"""When attention is flat, the rank order is meaningless and the analyzer says so."""

from attnmi import AnalysisConfig, Model, ModelConfig, analyze, capture, generate_symmetric_task

# every position repeats the same token, so a position-local encoder gives identical rows
ds = generate_symmetric_task(1000, 8, 30, seed=0)
model = Model(ModelConfig(vocab_size=30, encoder_kind="mlp", embed_dim=8, hidden_dim=16), seed=0)
report = analyze(capture(model, ds.test), AnalysisConfig(permutations=0))
spread = max(r["mean_attention"] for r in report.per_rank) - min(r["mean_attention"] for r in report.per_rank)
print(f"spread of mean attention across ranks: {spread:.2e}")
print(f"tau = {report.weighted_kendall_tau}, confidence = {report.tau_confidence}, flags = {report.flags}")
