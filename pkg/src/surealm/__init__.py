"""Suffix retrieval-augmented causal language modeling at desk scale.

Pipeline: corpus loading and prefix/suffix split enumeration -> deterministic
span encoding -> exact top-K embedding store -> retrieval-masked transformer
training -> progressive-retrieval decoding and perplexity evaluation.
"""

__version__ = "0.1.0"
