"""``authstore`` command-line client and password manager.

Exit codes: 0 success, 1 authentication failure, 2 usage error,
3 protocol or I/O error.
"""

from __future__ import annotations

import argparse
import getpass
import json
import os
import shlex
import sys
from pathlib import Path

from .account import InvalidUsername, canonical_username, parse_reset_token
from .client import (
    AuthenticationFailed,
    ClientError,
    Connection,
    ServerError,
    credentials_from_base,
    make_credentials,
)
from .group import get_profile
from .messages import ErrorCode
from .pake import PakeError, ServerAuthFailed
from .stretch import (
    DEFAULT_CACHE,
    DEFAULT_MEM_KIB,
    DEFAULT_PARALLELISM,
    DEFAULT_TIME_COST,
    KdfError,
    KdfParams,
    UserKey,
    to_auth_scalar,
    user_key_from_password,
)
from .vault import (
    CorruptVault,
    CredentialKind,
    CredentialRecord,
    NotFound,
    VaultDocument,
    VaultError,
    VaultLocked,
    load_vault,
    save_vault,
    vault_change_password,
    vault_create,
    vault_open,
)
from .wire import WireError

EXIT_OK, EXIT_AUTH, EXIT_USAGE, EXIT_PROTOCOL = 0, 1, 2, 3
SERVER_ENV = "AUTHSTORE_SERVER"
GROUP_ENV = "AUTHSTORE_GROUP"


class UsageError(Exception):
    pass


def default_vault_path() -> Path:
    if os.name == "nt":
        base = Path(os.environ.get("APPDATA", Path.home()))
    else:
        base = Path(os.environ.get("XDG_CONFIG_HOME", Path.home() / ".config"))
    return base / "authstore" / "vault.avlt"


def parse_address(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"server must be host:port, got {value!r}")
    return host or "127.0.0.1", int(port)


def _target(args) -> tuple[tuple[str, int], str]:
    """Resolve ``[server] username`` positionals, falling back to $AUTHSTORE_SERVER."""
    if len(args.target) == 2:
        server, username = args.target
    elif len(args.target) == 1 and os.environ.get(SERVER_ENV):
        server, username = os.environ[SERVER_ENV], args.target[0]
    else:
        raise UsageError(f"expected [server] username (or set ${SERVER_ENV})")
    return parse_address(server), username


def _read_secret_file(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.readline().rstrip("\r\n")


def _password(args, prompt: str = "Password: ", *, confirm: bool = False, file_attr: str = "password_file") -> str:
    path = getattr(args, file_attr, None)
    if path:
        pw = _read_secret_file(path)
    else:
        pw = getpass.getpass(prompt)
        if confirm and getpass.getpass("Repeat: ") != pw:
            raise UsageError("passwords do not match")
    if not pw:
        raise UsageError("password must not be empty")
    return pw


def _kdf_params(args) -> KdfParams:
    if args.kdf == "test-iterated":
        return KdfParams.test_iterated(time_cost=args.passes or 1)
    return KdfParams.memory_hard(
        mem_cost=args.mem_kib or DEFAULT_MEM_KIB,
        time_cost=args.passes or DEFAULT_TIME_COST,
        parallelism=args.parallelism or DEFAULT_PARALLELISM,
    )


def _kdf_overridden(args) -> bool:
    return bool(args.kdf_explicit or args.mem_kib or args.passes or args.parallelism)


def _connect(args, address) -> Connection:
    conn = Connection(address, get_profile(args.group))
    args._connections.append(conn)
    return conn


def _save_transcript(args) -> None:
    if not args.transcript:
        return
    frames = [
        {"direction": d, "frame": raw.hex()}
        for conn in args._connections
        for d, raw in conn.transcript
    ]
    Path(args.transcript).write_text(json.dumps(frames, indent=1))


def _provider_site(address) -> str:
    return f"authstore://{address[0]}:{address[1]}"


def _login(args, address, username, password) -> Connection:
    conn = _connect(args, address)
    conn.authenticate(username, password)
    return conn


def _vault_path(args) -> Path:
    return Path(args.vault) if args.vault else default_vault_path()


# -- commands ---------------------------------------------------------------


def cmd_register(args, out) -> int:
    address, username = _target(args)
    group = get_profile(args.group)
    if args.reuse_base:
        cached = DEFAULT_CACHE.most_recent()
        if cached is None:
            raise UsageError("--reuse-base needs a base key derived earlier in this session")
        kdf_params, base = cached
        p_pi, h, _ = credentials_from_base(group, base, kdf_params)
    else:
        password = _password(args, confirm=True)
        p_pi, h, _ = make_credentials(group, password, _kdf_params(args))
    conn = _connect(args, address)
    with conn:
        conn.register(username, p_pi, h)
    print("registered", file=out)
    return EXIT_OK


def cmd_login(args, out) -> int:
    address, username = _target(args)
    group = get_profile(args.group)
    if args.from_vault:
        handle = vault_open(load_vault(_vault_path(args)), _password(args, "Vault password: "))
        record = handle.get_record(_provider_site(address), canonical_username(username))
        conn = _connect(args, address)
        conn.authenticate(username, pi=to_auth_scalar(UserKey(record.secret), group))
    else:
        password = _password(args)
        conn = _login(args, address, username, password)
        if args.save_key:
            _cache_user_key(args, address, password, conn)
    conn.close()
    print("OK", file=out)
    return EXIT_OK


def _cache_user_key(args, address, password, conn) -> None:
    path = _vault_path(args)
    # A new vault reuses the authentication KDF costs and salt, so the base key
    # derived for login is a cache hit here.
    doc = load_vault(path) if path.exists() else vault_create(password, conn.p_pi.base)
    handle = vault_open(doc, password)
    k_auth = user_key_from_password(conn.p_pi, password)
    handle.add_record(
        CredentialRecord(_provider_site(address), conn.username, k_auth.bytes, CredentialKind.USER_KEY_CACHE, conn.p_pi),
        replace=True,
    )
    save_vault(path, handle.to_document())


def cmd_passwd(args, out) -> int:
    address, username = _target(args)
    group = get_profile(args.group)
    old_pw = _password(args, "Current password: ")
    conn = _login(args, address, username, old_pw)
    with conn:
        new_pw = _password(args, "New password: ", confirm=True, file_attr="new_password_file")
        new_kdf = _kdf_params(args) if _kdf_overridden(args) else conn.p_pi.base.with_fresh_salt()
        p_pi, h, _ = make_credentials(group, new_pw, new_kdf)
        conn.change_credentials(p_pi, h)
        print("credentials updated", file=out)
        path = _vault_path(args)
        if path.exists():
            try:
                doc = vault_change_password(load_vault(path), old_pw, new_pw, new_kdf)
            except VaultLocked:
                print("warning: local vault uses a different password; not rewrapped", file=sys.stderr)
                return EXIT_OK
            handle = vault_open(doc, new_pw)
            site = _provider_site(address)
            if any(r.site == site and r.login == conn.username for r in handle.list_records()):
                k_auth = user_key_from_password(p_pi, new_pw)
                handle.add_record(
                    CredentialRecord(site, conn.username, k_auth.bytes, CredentialKind.USER_KEY_CACHE, p_pi),
                    replace=True,
                )
                doc = handle.to_document()
            save_vault(path, doc)
            version, _ = conn.get_blob()
            if version:
                conn.put_blob(version + 1, doc.to_bytes())
            print("vault key rewrapped", file=out)
    return EXIT_OK


def cmd_reset(args, out) -> int:
    address, username = _target(args)
    group = get_profile(args.group)
    try:
        pi = parse_reset_token(group, args.token)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    conn = _connect(args, address)
    with conn:
        conn.authenticate(username, pi=pi)
        new_pw = _password(args, "New password: ", confirm=True, file_attr="new_password_file")
        p_pi, h, _ = make_credentials(group, new_pw, _kdf_params(args))
        conn.change_credentials(p_pi, h)
    print("account reset; new password set", file=out)
    print(
        "warning: data encrypted under the old password (including any synced vault) cannot be recovered",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_vault_add(args, out) -> int:
    path = _vault_path(args)
    password = _password(args, "Vault password: ")
    doc = load_vault(path) if path.exists() else vault_create(password, _kdf_params(args))
    handle = vault_open(doc, password)
    if args.secret_file:
        secret = _read_secret_file(args.secret_file)
    else:
        secret = getpass.getpass(f"Secret for {args.site}: ")
    handle.add_record(CredentialRecord(args.site, args.login, secret.encode("utf-8")), replace=args.replace)
    save_vault(path, handle.to_document())
    print("added", file=out)
    return EXIT_OK


def _record_view(r: CredentialRecord) -> dict:
    return {"site": r.site, "login": r.login, "kind": r.kind.name.lower().replace("_", "-")}


def cmd_vault_get(args, out) -> int:
    handle = vault_open(load_vault(_vault_path(args)), _password(args, "Vault password: "))
    record = handle.get_record(args.site, args.login)
    if record.kind is CredentialKind.WEB_PASSWORD:
        print(record.secret.decode("utf-8"), file=out)
    else:
        print(record.secret.hex(), file=out)
    return EXIT_OK


def cmd_vault_list(args, out) -> int:
    handle = vault_open(load_vault(_vault_path(args)), _password(args, "Vault password: "))
    rows = [_record_view(r) for r in handle.list_records()]
    if args.json:
        print(json.dumps(rows), file=out)
        return EXIT_OK
    width = max([len(r["site"]) for r in rows] + [4])
    print(f"{'SITE':<{width}}  LOGIN", file=out)
    for r in rows:
        suffix = "  (user key)" if r["kind"] == "user-key-cache" else ""
        print(f"{r['site']:<{width}}  {r['login']}{suffix}", file=out)
    return EXIT_OK


def cmd_vault_sync(args, out) -> int:
    address, username = _target(args)
    path = _vault_path(args)
    conn = _login(args, address, username, _password(args))
    with conn:
        version, blob = conn.get_blob()
        if args.pull or not path.exists():
            if not version:
                print("nothing to pull", file=out)
                return EXIT_OK
            save_vault(path, VaultDocument.from_bytes(blob))
            print(f"pulled version {version}", file=out)
            return EXIT_OK
        local = path.read_bytes()
        if local == blob:
            print("up to date", file=out)
            return EXIT_OK
        conn.put_blob(version + 1, local)
        print(f"pushed version {version + 1}", file=out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------


class _KdfAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace.kdf_explicit = True


def _add_kdf_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("key stretching parameters")
    g.add_argument("--kdf", choices=["argon2id", "test-iterated"], default="argon2id", action=_KdfAction,
                   help="KDF algorithm; test-iterated is cheap and for testing only")
    g.add_argument("--mem-kib", type=int, help=f"memory cost in KiB (default {DEFAULT_MEM_KIB})")
    g.add_argument("--passes", type=int, help=f"time cost (default {DEFAULT_TIME_COST})")
    g.add_argument("--parallelism", type=int, help=f"lanes (default {DEFAULT_PARALLELISM})")
    p.set_defaults(kdf_explicit=False)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--group", default=os.environ.get(GROUP_ENV, "modp-2048"),
                        choices=["toy", "test-256", "modp-2048"], help="group profile (must match the server)")
    common.add_argument("--vault", help="vault file (default: per-user config directory)")
    common.add_argument("--password-file", help="UNSAFE, for testing: read the password from a file")
    common.add_argument("--transcript", help="write the frames exchanged with the server to this file")

    parser = argparse.ArgumentParser(prog="authstore", description="AuthStore client and password manager.")
    sub = parser.add_subparsers(dest="command", required=True)

    def target(p):
        p.add_argument("target", nargs="+", metavar="[server] username",
                       help=f"server as host:port (default ${SERVER_ENV}) and username")

    p = sub.add_parser("register", parents=[common], help="create an account")
    target(p)
    _add_kdf_flags(p)
    p.add_argument("--reuse-base", action="store_true",
                   help="reuse this session's cached base key; no password prompt")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("login", parents=[common], help="authenticate")
    target(p)
    p.add_argument("--save-key", action="store_true", help="cache the derived user key in the vault")
    p.add_argument("--from-vault", action="store_true", help="authenticate with the user key cached in the vault")
    p.set_defaults(func=cmd_login)

    p = sub.add_parser("passwd", parents=[common], help="change password or key parameters")
    target(p)
    _add_kdf_flags(p)
    p.add_argument("--new-password-file", help="UNSAFE, for testing: read the new password from a file")
    p.set_defaults(func=cmd_passwd)

    p = sub.add_parser("reset", parents=[common], help="redeem a reset token and set a new password")
    target(p)
    _add_kdf_flags(p)
    p.add_argument("--token", required=True, help="hex token from the provider's operator")
    p.add_argument("--new-password-file", help="UNSAFE, for testing: read the new password from a file")
    p.set_defaults(func=cmd_reset)

    vault = sub.add_parser("vault", help="local password manager").add_subparsers(dest="vault_command", required=True)
    p = vault.add_parser("add", parents=[common], help="add a credential")
    p.add_argument("site")
    p.add_argument("login")
    p.add_argument("--secret-file", help="UNSAFE, for testing: read the secret from a file")
    p.add_argument("--replace", action="store_true")
    _add_kdf_flags(p)
    p.set_defaults(func=cmd_vault_add)

    p = vault.add_parser("get", parents=[common], help="print a stored secret")
    p.add_argument("site")
    p.add_argument("login", nargs="?")
    p.set_defaults(func=cmd_vault_get)

    p = vault.add_parser("list", parents=[common], help="list stored credentials")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_vault_list)

    p = vault.add_parser("sync", parents=[common], help="push or pull the vault via the provider")
    target(p)
    p.add_argument("--pull", action="store_true", help="overwrite the local vault with the provider's copy")
    p.set_defaults(func=cmd_vault_sync)

    sub.add_parser("shell", parents=[common],
                   help="run commands in one process so derived base keys stay cached").set_defaults(func=cmd_shell)
    return parser


def cmd_shell(args, out) -> int:
    status = EXIT_OK
    for line in sys.stdin:
        argv = shlex.split(line)
        if not argv:
            continue
        if argv[0] in ("exit", "quit"):
            break
        status = main(argv, out=out)
        print(f"[exit {status}]", file=out, flush=True)
    return status


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if len(getattr(args, "target", ())) > 2:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    args._connections = []
    try:
        return args.func(args, out)
    except (UsageError, InvalidUsername) as exc:
        print(f"authstore: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AuthenticationFailed, ServerAuthFailed, VaultLocked):
        print("authentication failed", file=sys.stderr)
        return EXIT_AUTH
    except ServerError as exc:
        if exc.code in (ErrorCode.AUTH_FAILED, ErrorCode.RATE_LIMITED):
            print(f"authentication failed ({exc})", file=sys.stderr)
            return EXIT_AUTH
        print(f"authstore: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except NotFound as exc:
        print(f"authstore: no such record {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (ClientError, PakeError, WireError, CorruptVault, VaultError, KdfError, OSError) as exc:
        print(f"authstore: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    finally:
        _save_transcript(args)
        for conn in args._connections:
            conn.close()


if __name__ == "__main__":
    sys.exit(main())
