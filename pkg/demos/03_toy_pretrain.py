"""A miniature self-supervised pretraining run, end to end.

Synthetic 32x32 images are mosaics of 8x8 class textures laid out in
shuffled, rolled blocks, so patch content determines the class while
position tells you nothing. The student encoder sees only the unmasked
patches, a cross-attention predictor guesses the teacher's balanced
cluster assignment at masked positions, and the teacher trails the
student as an EMA. Takes about a minute on a CPU.

    python3 demos/03_toy_pretrain.py
"""

import os

import numpy as np

from maskclust import trainer, workbench

OUT = os.path.join(os.path.dirname(__file__), "output", "toy_run")

CONFIG_TEXT = """
seed = 0
image_size = 32
patch_size = 8
enc_depth = 2
enc_dim = 32
enc_heads = 4
n_registers = 4
batch_size = 32
total_steps = 300
num_prototypes = 16
num_pred_targets = 4
learning_rate = 0.001
"""


def main():
    config = workbench.parse_config(CONFIG_TEXT)
    net_config = config.network_config()
    train_config = config.train_config()
    schedule = config.schedule()

    state = trainer.init_state(net_config, train_config, config.seed, **config.head_kwargs())
    spec = workbench.SyntheticSpec(patch_size=config.patch_size, image_size=config.image_size)
    batch_fn = workbench.synthetic_batch_fn(spec, config.batch_size, config.seed)

    def on_metrics(m):
        if m["step"] % 50 == 0:
            print(f"step {m['step']:4d}  masked-prediction {m['mim_loss']:.3f}  "
                  f"clustering {m['cluster_loss']:.3f}  "
                  f"target entropy {m['target_entropy']:.3f}  "
                  f"position MI {m['position_mi']:.4f}")

    print(f"uniform-prediction loss would be ln({config.num_prototypes}) "
          f"= {np.log(config.num_prototypes):.3f}")
    trainer.pretrain(
        state, batch_fn, train_config, schedule, OUT, net_config, on_metrics=on_metrics
    )

    made = workbench.emit_plots(os.path.join(OUT, "metrics.jsonl"), OUT)
    print("\nwrote:", os.path.join(OUT, "checkpoint_final.npz"))
    for info in made.values():
        print("wrote:", info["file"])
    print("\nnext: python3 demos/04_probes.py  (evaluates this checkpoint)")


if __name__ == "__main__":
    main()
