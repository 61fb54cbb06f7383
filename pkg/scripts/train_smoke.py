"""Train a DE-GAP model on synthetic scenes and report loss and held-out PSNR.

Defaults follow the reference smoke recipe (16x16 frames, 4 frames, 8
samples, 200 steps, lr 1e-3, contraction target 0.5). Use ``--lr`` and
``--steps`` to explore other schedules.
"""
import argparse
import logging

from scideq.deq import DE_GAP, DeqModel, TrainConfig, deq_forward, make_dataset, train
from scideq.diagnostics import psnr
from scideq.errors import NotConverged, TrainingFailed
from scideq.nets import DENOISER, init_params
from scideq.sensing import phi_adjoint


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--n", type=int, default=256)
    parser.add_argument("--b", type=int, default=4)
    parser.add_argument("--samples", type=int, default=8)
    parser.add_argument("--target", type=float, default=0.5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--history", help="write the loss history CSV here")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = TrainConfig(learning_rate=args.lr, steps=args.steps, batch=args.samples, seed=args.seed,
                      contraction_target=args.target, n=args.n, B=args.b, samples=args.samples)
    dataset = make_dataset(cfg.n, cfg.B, cfg.samples, seed=cfg.seed)
    model = DeqModel(DE_GAP, init_params(DENOISER, 2, 3, seed=cfg.seed))
    try:
        params, history = train(model, dataset, cfg)
    except TrainingFailed as exc:
        print(f"training stopped: {exc}")
        params, history = exc.params, exc.history
    if args.history:
        history.to_csv(args.history)

    losses = history.losses
    print(f"steps completed {len(losses)}, initial loss {losses[0]:.5g}, final loss {losses[-1]:.5g}, "
          f"ratio {losses[-1] / losses[0]:.3g}")
    held_out = make_dataset(cfg.n, cfg.B, 1, seed=cfg.seed + 1000)[0]
    baseline = psnr(phi_adjoint(held_out.masks, held_out.y), held_out.truth)
    try:
        xhat, trace = deq_forward(DeqModel(DE_GAP, params), held_out.masks, held_out.y)
        print(f"held-out PSNR {psnr(xhat, held_out.truth):.2f} dB vs baseline {baseline:.2f} dB "
              f"({trace.iterations} forward iterations)")
    except NotConverged as exc:
        print(f"held-out forward solve failed: {exc}; baseline {baseline:.2f} dB")


if __name__ == "__main__":
    main()
