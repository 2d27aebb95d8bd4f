"""groundcap: a desk-scale grounded image captioning laboratory.

Pipeline: synthetic scenes -> POS-restricted image-text matcher ->
attention-distilled caption decoder -> self-critical fine-tuning with a
caption-quality plus matching-score reward -> grounding/caption metrics.
"""

__version__ = "0.1.0"
