# flake8: noqa
from .layout import FFDCMask, VerifierLayout, build_mask
from .model import ChunkCache, FFDCVerifier, KVCache, VerifierTokens, assemble_input
from .training import evaluate, train_verifier
