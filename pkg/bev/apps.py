from django.apps import AppConfig


class BevAppConfig(AppConfig):
    name = 'bev'
    verbose_name = "Bird's-eye-view rasterization"
