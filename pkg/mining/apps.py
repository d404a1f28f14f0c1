from django.apps import AppConfig


class MiningAppConfig(AppConfig):
    name = 'mining'
    verbose_name = 'Pair mining'
