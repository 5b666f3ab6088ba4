"""
tools/
Numerical workers of the lab: spectral space, noise, models, forward and
backward solvers, change of measure, maximum principle and Malliavin
calculus, plus run configuration and results persistence.
"""
