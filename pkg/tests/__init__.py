"""
Fichier __init__.py pour le package tests
"""
