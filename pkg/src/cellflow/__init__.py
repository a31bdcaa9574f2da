"""Generative modeling of B-Rep cell complexes as particle sets.

Submodules:
    tensor      tape-based reverse-mode autodiff over numpy arrays
    nn          layers (attention, graph convolution, gated FFN) + AdamW/EMA
    geometry    rational cubic Bezier curves, frames, plane fits, distances
    cells       cell complexes, incidence diagrams, flatten/restore
    dataio      procedural catalog, normalization/padding, record IO
    ccvae       set variational autoencoder with compositional decoding
    flow        rectified-flow velocity model, sampler, clustering
    assembly    primitive fitting, loop orientation, validity, export
    metrics     distribution / diversity / CAD quality metrics
    pipeline    end-to-end orchestration used by the CLI and tests
    cli         command-line entry point
"""

__version__ = "0.1.0"
