"""Tiny slides and configs shared by the training and evaluation tests."""

from engine.backbone import BackboneConfig
from engine.training import TrainConfig
from slides.generator import generate_virtual_slide
from slides.geometry import ResolutionSpec
from slides.tiling import extract_triples

TINY_SPEC = ResolutionSpec((4, 2, 1), 16)
TINY_BACKBONE = BackboneConfig(n_classes=3, base_channels=2, encoder_blocks=2, decoder_blocks=2)


def tiny_slide(seed=0, base_side=64):
    return generate_virtual_slide(seed, base_side, TINY_BACKBONE.n_classes, TINY_SPEC)


def tiny_triples(seeds=(0,), base_side=64):
    triples = []
    for index, seed in enumerate(seeds):
        triples.extend(extract_triples(tiny_slide(seed, base_side), TINY_SPEC, slide_index=index))
    return triples


def tiny_train_config(**overrides):
    values = {
        "epochs_step1": 2,
        "epochs_step2": 2,
        "epochs_step3": 2,
        "batch_size": 4,
        "learning_rate": 1e-3,
        "seed": 0,
        "plain_fusion_epochs": 2,
    }
    values.update(overrides)
    return TrainConfig(**values)
