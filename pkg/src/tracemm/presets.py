"""Named run presets.

``FULL_SCALE`` is the configuration behind the end-to-end learnability run:
a balanced 10-class corpus of 7x168 instances with at least 2,000 training
examples, 30 pretraining epochs, and a long alignment stage, sized to finish
inside a 30-minute CPU budget in this double-precision engine.
"""

FULL_SCALE = {
    "data": dict(channels=7, timesteps=168, n_per_class=320, class_count=10),
    "model": dict(d=48, n_layers=2, n_heads=4, patch_len=24, channels=7, dropout=0.0),
    "pretrain": dict(epochs=30, batch_size=64, lr=3e-3, weight_decay=0.0, seed=0),
    "align": dict(
        k=8, epochs=110, batch_size=64, lr=3e-3, temperature=0.1, weight_decay=0.0, seed=0
    ),
    "forecast": dict(history_len=96, horizon=24),
    "rag": dict(r=3, epochs=10, batch_size=32, lr=1e-2, seed=0),
}
