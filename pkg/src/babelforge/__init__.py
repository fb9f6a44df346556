"""babelforge: a desk-scale multilingual sequence-to-sequence lab.

Multilingual denoising pretraining, multilingual finetuning (many-to-one,
one-to-many, many-to-many through an English pivot), and extension of a
pretrained checkpoint to new languages, on synthetic language families.
"""

__version__ = "0.1.0"
