"""Neuroevolution of masked-gate LSTM networks for time-series prediction.

The package trains recurrent networks on sliding windows of multichannel
time series and evolves the intra-cell gate connectivity with an ant
colony search, either in a single process or distributed over sockets.
"""

__version__ = "0.1.0"
