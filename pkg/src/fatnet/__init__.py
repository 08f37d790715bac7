"""Numpy engine for fully adaptive self-attention and the FAT backbones."""
from .accounting import Budget, LayerSpec, budget, count_flops, count_params, diff_budgets
from .fasa import FasaConfig, fasa_forward
from .model import PRESETS, FatConfig, FatModel, build_preset, fat_forward
from .modelio import WeightStore, init_random, load, load_image_ppm, save
from .spectral import Spectrum, branch_spectra, dft2_magnitude
from .tensor import Tape, Tensor, grad

__all__ = [
    "Budget", "FasaConfig", "FatConfig", "FatModel", "LayerSpec", "PRESETS", "Spectrum", "Tape", "Tensor",
    "WeightStore", "branch_spectra", "budget", "build_preset", "count_flops", "count_params", "dft2_magnitude",
    "diff_budgets", "fasa_forward", "fat_forward", "grad", "init_random", "load", "load_image_ppm", "save",
]
