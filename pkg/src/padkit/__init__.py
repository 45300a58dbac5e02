"""padkit: desk-scale conditional diffusion synthesis of PET-like images
from uniform organ activity maps, plus the quantitative evaluation
battery (concordance, noise, radiomics, tumor-task, observer study)."""

__version__ = "0.1.0"
