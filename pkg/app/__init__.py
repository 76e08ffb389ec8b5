"""
RxExtract v1.0.0 - Application Package
Medicine-name extraction from handwritten prescriptions

This package contains:
- tensor: float32 numeric kernel (matmul, conv2d, softmax, RoI sampling)
- geometry: boxes, masks and mask RLE
- detector: toy backbone, FPN, RPN, RoI Align, heads and NMS
- recognizer: patch embedding and encoder-decoder transformer
- weights: RXW1 weight files and seeded initialisation
- matcher: Levenshtein / fuzzy lexicon matching
- metrics: CER and average precision
- fixtures: synthetic prescription images
- pipeline: end-to-end runs and reports
- storage: report emission with checksums
- audit: dual audit logging (file + DB)
- models: ledger models (SQLAlchemy)
"""

__version__ = '1.0.0'
__description__ = 'Medicine-name extraction from handwritten prescriptions'
