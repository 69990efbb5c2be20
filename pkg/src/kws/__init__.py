"""Text-enrolled keyword spotting: feature front-ends, a CTC-pretrained frame
embedder, parallel attention fusion, duration-aligned training, and an
EER/AUC evaluation harness."""

__version__ = "0.1.0"
