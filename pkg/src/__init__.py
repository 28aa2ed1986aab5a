# Модули лаборатории OoD-детекции на нормализующих потоках
