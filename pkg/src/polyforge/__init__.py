"""polyforge: mask-conditioned diffusion at desk scale.

Train denoising diffusion models under five data regimes, generate jointly
annotated images, deduplicate datasets in embedding space, score generated
data quality (Frechet distance, Inception Score, precision/recall), and run
pretrain-then-finetune localization grids.
"""

__version__ = "0.1.0"
