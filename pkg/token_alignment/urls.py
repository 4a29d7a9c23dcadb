from django.urls import path

from .views import CustomAuthToken, RunMetricsFileAPIView

app_name = "token_alignment"


urlpatterns = [
    path('token-auth/', CustomAuthToken.as_view(), name="auth_token"),
    path('runs/<int:pk>/metrics/', RunMetricsFileAPIView.as_view(), name='run-metrics'),
]
