"""
Multi-Decoder U-Net
Segmentazione con quantificazione dell'incertezza da annotazioni multiple
"""

__version__ = "1.0.0"
__description__ = "U-Net a encoder condiviso e decoder multipli addestrata sulle annotazioni di più esperti"
