"""
Independent numerical oracles for the test suite.

Nothing here imports the retention package; every check works on plain
arrays and callables.
"""
