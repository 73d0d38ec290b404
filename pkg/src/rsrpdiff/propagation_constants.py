"""Published path-loss coefficients.

Okumura-Hata (urban):
    M. Hata, "Empirical formula for propagation loss in land mobile radio
    services", IEEE Trans. Veh. Technol., VT-29(3), 1980.
    Validity: 150-1500 MHz, h_BS 30-200 m, h_MS 1-10 m, d 1-20 km.

WINNER II scenario C2 (typical urban macro-cell), LOS:
    IST-4-027756 WINNER II D1.1.2 v1.2, "WINNER II Channel Models", 2007,
    Table 4-4.
        PL = 26 log10(d) + 39 + 20 log10(fc/5)                 10 m < d < d'BP
        PL = 40 log10(d) + 13.47 - 14 log10(h'BS) - 14 log10(h'MS)
             + 6 log10(fc/5)                                    d'BP < d < 5 km
    with fc in GHz, h' = h - 1 m and d'BP = 4 h'BS h'MS fc / c (fc in Hz).
    Validity: 2-6 GHz.
"""

SPEED_OF_LIGHT = 299_792_458.0

# Band edges used for model selection (Hz)
HATA_BAND = (150e6, 1500e6)
WINNER2_BAND = (2e9, 6e9)

# Okumura-Hata urban
HATA_A = 69.55
HATA_B = 26.16
HATA_HB = 13.82
HATA_C = 44.9
HATA_D = 6.55
HATA_VALID_HT = (30.0, 200.0)
HATA_VALID_HR = (1.0, 10.0)
HATA_VALID_D_KM = (1.0, 20.0)

# WINNER II C2 LOS
WINNER2_C2_LOS_NEAR = (26.0, 39.0, 20.0)  # slope, intercept, frequency coefficient
WINNER2_C2_LOS_FAR = (40.0, 13.47, 14.0, 14.0, 6.0)  # slope, intercept, h'BS, h'MS, frequency
WINNER2_EFFECTIVE_HEIGHT_OFFSET = 1.0
WINNER2_REF_FREQ_GHZ = 5.0
WINNER2_VALID_D = (10.0, 5000.0)
