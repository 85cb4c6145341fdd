"""Spoofing-aware speaker verification back-end.

Fuses a multi-enrollment attention ASV score with a countermeasure score,
trained end to end on embedding-level data with hard-negative mining, and
evaluated with SV-, SPF- and SASV-EER.
"""

__version__ = "0.1.0"
