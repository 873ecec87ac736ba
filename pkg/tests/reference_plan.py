"""Feature-map sizes of the reference architecture at 320x320 input, base width 64.

One entry per table row: (ingredient, kernel, size). ``size`` is (h, w, c),
(h, w) where only the spatial size is listed, or None for "--".
"""

REFERENCE_PLAN = [
    ("Input", None, (320, 320, 1)),
    # Down 1
    ("Conv", 3, (320, 320, 64)),
    ("Dense (6 Conv)", 3, None),
    ("BN, PReLU, Conv", 2, (320, 320, 64)),
    # Down 2
    ("Conv (stride 2)", 2, (160, 160, 64)),
    ("BN, PReLU, Conv", 3, (160, 160, 128)),
    ("Dense (6 Conv)", 3, None),
    ("BN, PReLU, Conv", 2, (160, 160, 128)),
    # Down 3
    ("Conv (stride 2)", 2, (80, 80, 128)),
    ("BN, PReLU, Conv", 3, (80, 80, 256)),
    ("Dense (6 Conv)", 3, None),
    ("BN, PReLU, Conv", 2, (80, 80, 256)),
    # Down 4
    ("Conv (stride 2)", 2, (40, 40, 256)),
    ("BN, PReLU, Conv", 3, (40, 40, 512)),
    ("Dense (6 Conv)", 3, None),
    ("BN, PReLU, Conv", 2, (40, 40, 512)),
    # Bridge
    ("Conv (stride 2)", 2, (20, 20, 512)),
    ("BN, PReLU, Conv", 2, (20, 20, 1024)),
    # Up 4
    ("Dense (6 Conv)", 3, None),
    ("BN, PReLU, Conv", 2, (20, 20, 1024)),
    ("Unpooling", None, (40, 40)),
    ("Addition", None, None),
    # Up 3
    ("BN, PReLU, Conv", 3, (40, 40, 512)),
    ("Dense (6 Conv)", 3, None),
    ("BN, PReLU, Conv", 2, (40, 40, 512)),
    ("Unpooling", None, (80, 80)),
    # Up 2
    ("Addition", None, None),
    ("BN, PReLU, Conv", 3, (80, 80, 256)),
    ("Dense (6 Conv)", 3, None),
    ("BN, PReLU, Conv", 2, (80, 80, 256)),
    # Up 1
    ("Unpooling", None, (160, 160)),
    ("Addition", None, None),
    ("BN, PReLU, Conv", 3, (160, 160, 128)),
    ("Dense (6 Conv)", 3, None),
    # output
    ("BN, PReLU, Conv", 2, (160, 160, 128)),
    ("Unpooling", None, (320, 320)),
    ("Addition", None, None),
    ("BN, PReLU, Conv", 3, (320, 320, 64)),
    ("Dense (6 Conv)", 3, None),
    ("BN, PReLU, Conv", 2, (320, 320, 64)),
    ("Conv", 1, (320, 320, 1)),
]
