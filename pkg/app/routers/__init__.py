# Routers package