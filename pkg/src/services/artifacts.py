# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Upload of exported artifacts to S3-compatible object storage."""

import logging
import os
import re
from pathlib import Path
from typing import Optional, Tuple
from urllib.parse import urlparse

import boto3
import botocore.client
import botocore.exceptions

from exceptions import ArtifactError

logger = logging.getLogger(__name__)

S3_SCHEME = "s3"
# S3 bucket naming rules, IP-shaped names excluded
BUCKET_NAME = re.compile(
    r"(?=^.{3,63}$)(?!^(\d+\.)+\d+$)"
    r"(^(([a-z0-9]|[a-z0-9][a-z0-9\-]*[a-z0-9])\.)*([a-z0-9]|[a-z0-9][a-z0-9\-]*[a-z0-9])$)"
)


class S3ArtifactStore:
    """Wrapper for writing artifacts into S3 buckets."""

    def __init__(
        self,
        access_key: Optional[str] = None,
        secret_access_key: Optional[str] = None,
        endpoint_url: Optional[str] = None,
        create_bucket_if_missing: bool = False,
    ):
        """Initialize the artifact store.

        Credentials and endpoint default to the AWS_ACCESS_KEY_ID, AWS_SECRET_ACCESS_KEY and
        AWS_ENDPOINT_URL environment variables; boto3 falls back to its own lookup if unset.

        Args:
            access_key: S3 access key ID
            secret_access_key: S3 secret access key
            endpoint_url: S3 service URL, e.g. http://localhost:9000
            create_bucket_if_missing: create the target bucket if it is not accessible
        """
        self.access_key = access_key or os.environ.get("AWS_ACCESS_KEY_ID")
        self.secret_access_key = secret_access_key or os.environ.get("AWS_SECRET_ACCESS_KEY")
        self.endpoint_url = endpoint_url or os.environ.get("AWS_ENDPOINT_URL")
        self.create_missing = create_bucket_if_missing

        self._client: botocore.client.BaseClient = None

    def check_if_bucket_accessible(self, bucket_name: str) -> bool:
        """Checks if a bucket exists and is accessible, returning True if both are satisfied.

        A botocore ClientError means the bucket does not exist, the session lacks permission,
        or the client failed otherwise; all of them return False.
        """
        try:
            self.client.head_bucket(Bucket=bucket_name)
            return True
        except botocore.exceptions.ClientError:
            return False

    def create_bucket_if_missing(self, bucket_name: str) -> None:
        """Creates the bucket if it is not accessible, without catching creation errors."""
        if self.check_if_bucket_accessible(bucket_name=bucket_name):
            return

        self.create_bucket(bucket_name=bucket_name)

    def create_bucket(self, bucket_name: str) -> None:
        """Create a bucket via the client."""
        self.client.create_bucket(Bucket=bucket_name)

    def upload(self, local_path: Path, uri: str) -> str:
        """Upload a local file to an s3:// URI and return the URI.

        Raises:
            ArtifactError: if the URI is malformed, the bucket is unusable or the upload fails
        """
        bucket, key = parse_s3_uri(uri)
        if not key or key.endswith("/"):
            key = f"{key}{Path(local_path).name}"
        try:
            if self.create_missing:
                self.create_bucket_if_missing(bucket)
            elif not self.check_if_bucket_accessible(bucket):
                raise ArtifactError(
                    f"bucket '{bucket}' is not accessible or does not exist. Pass "
                    "create_bucket_if_missing=True to create it"
                )
            self.client.upload_file(str(local_path), bucket, key)
        except (botocore.exceptions.BotoCoreError, botocore.exceptions.ClientError) as e:
            raise ArtifactError(f"upload to s3://{bucket}/{key} failed: '{str(e)}'")
        logger.info("uploaded %s to s3://%s/%s", local_path, bucket, key)
        return f"{S3_SCHEME}://{bucket}/{key}"

    @property
    def client(self) -> botocore.client.BaseClient:
        """Returns an open boto3 client, creating and caching one if needed."""
        if self._client:
            return self._client
        else:
            self._client = boto3.client(
                "s3",
                endpoint_url=self.endpoint_url,
                aws_access_key_id=self.access_key,
                aws_secret_access_key=self.secret_access_key,
            )
            return self._client


def is_s3_uri(path) -> bool:
    """Return True if path is an s3:// URI."""
    return str(path).startswith(f"{S3_SCHEME}://")


def parse_s3_uri(uri: str) -> Tuple[str, str]:
    """Split an s3://bucket/key URI into bucket and key.

    Raises:
        ArtifactError: if the URI is not an s3 URI or names an invalid bucket
    """
    parsed = urlparse(str(uri))
    if parsed.scheme != S3_SCHEME:
        raise ArtifactError(f"not an s3 URI: '{uri}'")
    bucket = parsed.netloc
    if not validate_s3_bucket_name(bucket):
        raise ArtifactError(f"invalid S3 bucket name '{bucket}' in '{uri}'")
    return bucket, parsed.path.lstrip("/")


def validate_s3_bucket_name(name: str) -> bool:
    """Return True if name is a valid S3 bucket name."""
    return BUCKET_NAME.match(name) is not None
