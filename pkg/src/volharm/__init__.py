"""Desk-scale volumetric style harmonization with conditional latent diffusion.

The package is organized bottom-up:

  engine     numpy-backed reverse-mode autodiff tensor engine
  fusion     instance-norm / AdaIN latent fusion and the diffusion schedule
  nn         layers on top of the engine (conv blocks, attention, Adam)
  autoenc    stage-1 variational 3-D conv autoencoder and its losses
  denoiser   stage-2 conditional denoising UNet and its loss stack
  sampler    DDIM/DDPM sampling and the end-to-end harmonize pipeline
  phantom    synthetic multi-site volumetric corpus generator
  baselines  min-max / z-score / histogram-matching harmonization
  metrics    SSIM / PSNR / PCC / Wasserstein evaluation battery
  harness    run configs, training loops, experiment orchestration
  cli        command-line entry points (gen, train-ae, train-cldm,
             harmonize, eval, report)
"""

__version__ = "0.1.0"
