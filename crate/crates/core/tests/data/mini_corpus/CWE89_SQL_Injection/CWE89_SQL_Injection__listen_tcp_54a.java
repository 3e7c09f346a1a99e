package testcases.CWE89_SQL_Injection;

import testcasesupport.*;

public class CWE89_SQL_Injection__listen_tcp_54a extends AbstractTestCase
{
    public void bad() throws Throwable
    {
        String data = System.getenv("PORT");
        (new CWE89_SQL_Injection__listen_tcp_54b()).badSink(data);
    }

    public void good() throws Throwable
    {
    }
}
