"""Builds the optional Cython kd-tree kernel; the package works without it."""
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # no compiler: fall back to pure Python
            print(f"warning: compiled kd-tree not built ({exc})")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc})")


try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension("epiout._kdtree_ext", ["src/epiout/_kdtree_ext.pyx"])],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
