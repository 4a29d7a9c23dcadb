from django.contrib import admin
from django.urls import path, include

from token_alignment.views import DRFAuthenticatedGraphQLView

urlpatterns = [
    path("admin/", admin.site.urls),

    # token and run artifact endpoints
    path("api/", include("token_alignment.urls", namespace="token_alignment")),

    # graphQL endpoints
    path('graphql/', DRFAuthenticatedGraphQLView.as_view(graphiql=True)),
]
